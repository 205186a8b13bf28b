//! `fedstab bounds`: recursions and envelopes for one set of bound inputs.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use fedstab_core::bounds::{
    assemble_excess_envelope, convergence_bound_sgd, excess_risk_bound_fosm, excess_risk_bound_sgd, ln_beta_minus,
    ln_beta_plus, ln_psi_beta, ln_stability_closed_form_fosm_at, stability_closed_form_sgd_at, stability_recursion_fosm,
    stability_recursion_sgd, stability_recursion_sgd_relaxed, BoundInputs, ExcessBound, Warning,
};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::output::{fmt_f64, write_json, write_table, SCHEMA_VERSION};
use crate::CliError;

pub const RECURSION_FILE: &str = "recursion.csv";
pub const ENVELOPE_SGD_FILE: &str = "envelope_sgd.csv";
pub const ENVELOPE_FOSM_FILE: &str = "envelope_fosm.csv";
pub const BOUNDS_SUMMARY_FILE: &str = "bounds_summary.json";

const RECURSION_COLUMNS: [&str; 9] = [
    "t",
    "eta_g_t",
    "sgd_exact",
    "sgd_relaxed",
    "fosm",
    "ln_fosm",
    "closed_form_sgd",
    "closed_form_fosm",
    "ln_closed_form_fosm",
];
const ENVELOPE_COLUMNS: [&str; 12] =
    ["t", "t1", "t2", "t3", "t4", "total", "ln_t1", "ln_t2", "ln_t3", "ln_t4", "ln_total", "convergence"];

/// Every round up to 10^4; beyond that the first 1000 rounds plus a log-spaced tail.
pub fn horizon_grid(t_max: usize) -> Vec<usize> {
    if t_max <= 10_000 {
        return (1..=t_max).collect();
    }
    let mut set: BTreeSet<usize> = (1..=1000).collect();
    let (lo, hi) = (1000f64.ln(), (t_max as f64).ln());
    for i in 0..=500 {
        set.insert(((lo + (hi - lo) * i as f64 / 500.0).exp().round() as usize).clamp(1, t_max));
    }
    set.insert(t_max);
    set.into_iter().collect()
}

/// `eta_g^t = min(cap, sqrt(c / max(t, 1)))` for `t = 0..T`.
pub fn bound_schedule(inputs: &BoundInputs, cap: Option<f64>) -> Vec<f64> {
    (0..inputs.t)
        .map(|t| {
            let e = (inputs.c / t.max(1) as f64).sqrt();
            cap.map_or(e, |c| e.min(c))
        })
        .collect()
}

fn envelope_row(t: usize, b: &ExcessBound) -> Vec<String> {
    let x = &b.terms;
    vec![
        t.to_string(),
        fmt_f64(x.t1),
        fmt_f64(x.t2),
        fmt_f64(x.t3),
        fmt_f64(x.t4),
        fmt_f64(b.total),
        fmt_f64(x.ln_t1),
        fmt_f64(x.ln_t2),
        fmt_f64(x.ln_t3),
        fmt_f64(x.ln_t4),
        fmt_f64(b.ln_total),
        fmt_f64(x.t1 + x.t2),
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct WarningFlags {
    pub overfitting_regime: bool,
    pub psi_out_of_range: bool,
    pub global_lr_above_one: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundsSummary {
    pub schema_version: u32,
    pub command: String,
    pub fingerprint: String,
    pub inputs: BoundInputs,
    pub psi: f64,
    pub psi_sigma: f64,
    pub sigma_n_sq: f64,
    pub sigma_n_sq_proof: f64,
    pub sigma_k_sq: f64,
    pub c_psi: f64,
    pub nu_sq_c_psi: f64,
    pub convergence_bound: f64,
    pub excess_sgd: ExcessBound,
    pub excess_fosm: ExcessBound,
    pub stability_closed_form_sgd: f64,
    pub ln_stability_closed_form_fosm: f64,
    pub ln_psi_beta: f64,
    pub beta_minus: f64,
    pub ln_beta_plus: f64,
    pub recursion_sgd_final: f64,
    pub recursion_sgd_relaxed_final: f64,
    pub ln_recursion_fosm_final: f64,
    /// Argmin round of the weighted stability + gradient-norm envelope (needs `C` or `mu`).
    pub predicted_t_star: Option<usize>,
    pub warnings: Vec<Warning>,
    pub warning_flags: WarningFlags,
    /// Every rate envelope is order-level (leading constants 1); recursions are exact.
    pub envelopes_are_order_level: bool,
}

pub fn cmd_bounds(config: &ExperimentConfig, out_dir: &Path) -> Result<BoundsSummary, CliError> {
    let bc = config.require_bounds()?;
    let inputs = &bc.inputs;
    let etas = bound_schedule(inputs, bc.eta_g_cap);
    let sgd = stability_recursion_sgd(inputs, &etas);
    let relaxed = stability_recursion_sgd_relaxed(inputs, &etas);
    let fosm = stability_recursion_fosm(inputs, &etas);
    let grid = horizon_grid(inputs.t);

    let mut rec_rows = Vec::with_capacity(grid.len());
    let mut sgd_rows = Vec::with_capacity(grid.len());
    let mut fosm_rows = Vec::with_capacity(grid.len());
    let mut s_curve = Vec::with_capacity(grid.len());
    let mut g_curve = Vec::with_capacity(grid.len());
    for &t in &grid {
        let ln_cf = ln_stability_closed_form_fosm_at(inputs, t);
        rec_rows.push(vec![
            t.to_string(),
            fmt_f64(etas[t - 1]),
            fmt_f64(sgd.values[t]),
            fmt_f64(relaxed.values[t]),
            fmt_f64(fosm.values[t]),
            fmt_f64(fosm.ln_values[t]),
            fmt_f64(stability_closed_form_sgd_at(inputs, t)),
            fmt_f64(ln_cf.exp()),
            fmt_f64(ln_cf),
        ]);
        let at = BoundInputs { t, ..inputs.clone() };
        sgd_rows.push(envelope_row(t, &excess_risk_bound_sgd(&at)));
        fosm_rows.push(envelope_row(t, &excess_risk_bound_fosm(&at)));
        s_curve.push(sgd.values[t]);
        g_curve.push(convergence_bound_sgd(&at));
    }

    let excess_sgd = excess_risk_bound_sgd(inputs);
    let excess_fosm = excess_risk_bound_fosm(inputs);
    let mut warnings: BTreeSet<Warning> = BTreeSet::new();
    for w in sgd.warnings.iter().chain(&fosm.warnings).chain(&excess_sgd.warnings).chain(&excess_fosm.warnings) {
        warnings.insert(*w);
    }
    let warnings: Vec<Warning> = warnings.into_iter().collect();
    for w in &warnings {
        eprintln!("warning: {}", w.message());
    }
    let predicted_t_star = match inputs.optimization_constant() {
        Ok(c) => Some(grid[assemble_excess_envelope(inputs.l, inputs.gamma, c, &s_curve, &g_curve)?.argmin]),
        Err(_) => None,
    };

    fs::create_dir_all(out_dir)?;
    write_table(&out_dir.join(RECURSION_FILE), &RECURSION_COLUMNS, &rec_rows)?;
    write_table(&out_dir.join(ENVELOPE_SGD_FILE), &ENVELOPE_COLUMNS, &sgd_rows)?;
    write_table(&out_dir.join(ENVELOPE_FOSM_FILE), &ENVELOPE_COLUMNS, &fosm_rows)?;
    let t = inputs.t;
    let summary = BoundsSummary {
        schema_version: SCHEMA_VERSION,
        command: "bounds".into(),
        fingerprint: config.fingerprint(),
        inputs: inputs.clone(),
        psi: inputs.psi(),
        psi_sigma: inputs.psi_sigma(),
        sigma_n_sq: inputs.sigma_n_sq(),
        sigma_n_sq_proof: inputs.sigma_n_sq_proof(),
        sigma_k_sq: inputs.sigma_k_sq(),
        c_psi: inputs.c_psi(),
        nu_sq_c_psi: inputs.nu * inputs.nu * inputs.c_psi(),
        convergence_bound: convergence_bound_sgd(inputs),
        excess_sgd,
        excess_fosm,
        stability_closed_form_sgd: stability_closed_form_sgd_at(inputs, t),
        ln_stability_closed_form_fosm: ln_stability_closed_form_fosm_at(inputs, t),
        ln_psi_beta: ln_psi_beta(inputs.beta, t),
        beta_minus: ln_beta_minus(inputs.beta, t).exp(),
        ln_beta_plus: ln_beta_plus(inputs.beta, t),
        recursion_sgd_final: sgd.values[t],
        recursion_sgd_relaxed_final: relaxed.values[t],
        ln_recursion_fosm_final: fosm.ln_values[t],
        predicted_t_star,
        warning_flags: WarningFlags {
            overfitting_regime: warnings.contains(&Warning::OverfittingRegime),
            psi_out_of_range: warnings.contains(&Warning::PsiOutOfRange),
            global_lr_above_one: warnings.contains(&Warning::GlobalLrAboveOne),
        },
        warnings,
        envelopes_are_order_level: true,
    };
    write_json(&out_dir.join(BOUNDS_SUMMARY_FILE), &summary)?;
    Ok(summary)
}
