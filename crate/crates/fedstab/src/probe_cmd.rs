//! `fedstab probe`: on-average model stability with an overlaid training run.

use std::fs;
use std::path::Path;

use fedstab_core::data::Replacement;
use fedstab_core::engine::{run_federated, FederationConfig};
use fedstab_core::probe::{
    average_curves, estimate_sigmas, estimate_smoothness, excess_risk_curve, replacement_indices, twin_distances,
    StabilityCurve,
};
use fedstab_core::rng::{label, Stream};
use serde::Serialize;

use crate::config::{ExperimentConfig, IndexChoice, ProbeConfig};
use crate::experiment::{empirical_minimum, prepare, Prepared};
use crate::output::{fmt_f64, fmt_opt, write_json, write_metrics_csv, write_table, SCHEMA_VERSION};
use crate::run::{MinimumInfo, CONFIG_FILE, METRICS_FILE};
use crate::CliError;

pub const STABILITY_FILE: &str = "stability.csv";
pub const PROBE_SUMMARY_FILE: &str = "probe_summary.json";
pub const STABILITY_COLUMNS: [&str; 6] = ["t", "mean_sq_dist", "stderr", "grad_norm_sq", "gen_gap", "excess_risk"];

/// Twin-run curves for every probe seed, averaged over all replicates.
pub fn stability_curve(prep: &Prepared, probe: &ProbeConfig) -> Result<StabilityCurve, CliError> {
    let n = prep.dataset.len();
    let mut curves = Vec::new();
    let mut all = Vec::new();
    for &seed in &probe.seeds {
        let indices = match &probe.indices {
            IndexChoice::Sample => replacement_indices(n, probe.replicates, seed)?,
            IndexChoice::Fixed(v) => {
                if let Some(j) = v.iter().find(|&&j| j >= n) {
                    return Err(CliError::Config(format!("[probe] index {j} is outside [0, {n})")));
                }
                v.clone()
            }
        };
        let cfg = FederationConfig { seed, ..prep.federation.clone() };
        curves.extend(twin_distances(&cfg, &prep.dataset, &prep.shards, &prep.spec, prep.sampler.as_ref(), &indices, seed, probe.replacement)?);
        all.extend(indices);
    }
    Ok(average_curves(&curves, all)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct Estimates {
    pub sigma_batch: usize,
    pub sigma_l_sq: f64,
    pub sigma_g_sq: f64,
    /// `[sigma_l_sq, sigma_g_sq]` at the initial point, the final iterate and the reference minimizer.
    pub per_point: Vec<(f64, f64)>,
    pub l_hat: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeSummary {
    pub schema_version: u32,
    pub command: String,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
    pub replicates: usize,
    pub indices: Vec<usize>,
    pub replacement: String,
    pub f_hat_min: Option<MinimumInfo>,
    pub e_min: Option<f64>,
    pub t_star: Option<usize>,
    pub stability_final: f64,
    pub estimates: Estimates,
}

pub fn cmd_probe(config: &ExperimentConfig, out_dir: &Path) -> Result<ProbeSummary, CliError> {
    let probe = config.require_probe()?.clone();
    let prep = prepare(config)?;
    let minimum = match prep.test {
        Some(_) => Some(empirical_minimum(&prep, &probe)?),
        None => None,
    };
    let curve = stability_curve(&prep, &probe)?;
    let run = run_federated(
        &prep.federation,
        &prep.spec,
        &prep.dataset,
        &prep.shards,
        prep.test.as_ref(),
        minimum.as_ref().map(|m| m.value),
    )?;
    let mut metrics = run.metrics;
    for m in &mut metrics {
        m.stability_sq = Some(curve.mean_sq_dist[m.t]);
    }
    let (e_min, t_star) = match &minimum {
        Some(m) => {
            let c = excess_risk_curve(&metrics, m.value)?;
            (Some(c.e_min), Some(c.t_star))
        }
        None => (None, None),
    };

    let sigma_batch = probe.sigma_batch.unwrap_or(prep.federation.batch_size);
    let mut points = vec![prep.spec.init_params(Stream::root(prep.federation.seed).child(label::INIT)), run.final_state.x.clone()];
    if let Some(m) = &minimum {
        points.push(m.params.clone());
    }
    let sigmas = estimate_sigmas(&prep.spec, &prep.dataset, &prep.shards, &points, sigma_batch)?;
    let l_hat = estimate_smoothness(&prep.spec, &prep.dataset, &prep.shards, probe.smoothness_pairs, probe.smoothness_radius, prep.federation.seed)?;

    let mut rows = Vec::with_capacity(curve.mean_sq_dist.len());
    let mut by_round = metrics.iter().peekable();
    for t in 0..curve.mean_sq_dist.len() {
        let m = by_round.next_if(|m| m.t == t);
        rows.push(vec![
            t.to_string(),
            fmt_f64(curve.mean_sq_dist[t]),
            fmt_f64(curve.stderr[t]),
            m.map(|m| fmt_f64(m.grad_norm_sq)).unwrap_or_default(),
            fmt_opt(m.and_then(|m| m.gen_gap)),
            fmt_opt(m.and_then(|m| m.excess_risk)),
        ]);
    }
    fs::create_dir_all(out_dir)?;
    write_table(&out_dir.join(STABILITY_FILE), &STABILITY_COLUMNS, &rows)?;
    write_metrics_csv(&out_dir.join(METRICS_FILE), &metrics)?;
    fs::write(out_dir.join(CONFIG_FILE), config.doc.canonical())?;
    let summary = ProbeSummary {
        schema_version: SCHEMA_VERSION,
        command: "probe".into(),
        fingerprint: config.fingerprint(),
        seeds: probe.seeds.clone(),
        replicates: curve.replicates,
        indices: curve.indices.clone(),
        replacement: match probe.replacement {
            Replacement::Fresh => "fresh".into(),
            Replacement::Original => "original".into(),
        },
        f_hat_min: minimum.as_ref().map(MinimumInfo::from),
        e_min,
        t_star,
        stability_final: *curve.mean_sq_dist.last().expect("curve has round 0"),
        estimates: Estimates { sigma_batch, sigma_l_sq: sigmas.sigma_l_sq, sigma_g_sq: sigmas.sigma_g_sq, per_point: sigmas.per_point, l_hat },
    };
    write_json(&out_dir.join(PROBE_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Mean squared distance at the last round, for sweep cells.
pub fn final_stability(prep: &Prepared, probe: &ProbeConfig) -> Result<f64, CliError> {
    let c = stability_curve(prep, probe)?;
    Ok(*c.mean_sq_dist.last().expect("curve has round 0"))
}

