//! `fedstab run`: one federated training run.

use std::fs;
use std::path::Path;

use fedstab_core::engine::{run_federated, RoundMetrics};
use fedstab_core::probe::{excess_risk_curve, EmpiricalMinimum};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ProbeConfig};
use crate::experiment::{empirical_minimum, prepare, Prepared};
use crate::output::{write_json, write_metrics_csv, SCHEMA_VERSION};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.ini";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub axis: String,
    pub value: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimumInfo {
    pub value: f64,
    pub strategy: String,
    pub budget_limited: bool,
}

impl From<&EmpiricalMinimum> for MinimumInfo {
    fn from(m: &EmpiricalMinimum) -> Self {
        MinimumInfo { value: m.value, strategy: m.strategy.tag().to_string(), budget_limited: m.budget_limited }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub command: String,
    pub fingerprint: String,
    pub seed: u64,
    pub config: String,
    pub sweep: Option<SweepCell>,
    pub f_hat_min: Option<MinimumInfo>,
    pub final_metrics: RoundMetrics,
    /// Minimum excess risk over recorded rounds and the first round attaining it.
    pub e_min: Option<f64>,
    pub t_star: Option<usize>,
    /// Mean squared twin distance at the last round, when a stability probe ran.
    pub stability_final: Option<f64>,
    pub rows: usize,
}

pub struct RunOutcome {
    pub prepared: Prepared,
    pub metrics: Vec<RoundMetrics>,
    pub minimum: Option<EmpiricalMinimum>,
}

/// Trains and evaluates; writes nothing.
pub fn execute(config: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    let prepared = prepare(config)?;
    let minimum = match prepared.test {
        Some(_) => {
            let probe = config.probe.clone().unwrap_or_default();
            Some(empirical_minimum(&prepared, &probe)?)
        }
        None => None,
    };
    let out = run_federated(
        &prepared.federation,
        &prepared.spec,
        &prepared.dataset,
        &prepared.shards,
        prepared.test.as_ref(),
        minimum.as_ref().map(|m| m.value),
    )?;
    Ok(RunOutcome { prepared, metrics: out.metrics, minimum })
}

pub fn summarize(
    config: &ExperimentConfig,
    command: &str,
    outcome: &RunOutcome,
    sweep: Option<SweepCell>,
    stability_final: Option<f64>,
) -> Result<RunSummary, CliError> {
    let (e_min, t_star) = match &outcome.minimum {
        Some(m) => {
            let c = excess_risk_curve(&outcome.metrics, m.value)?;
            (Some(c.e_min), Some(c.t_star))
        }
        None => (None, None),
    };
    Ok(RunSummary {
        schema_version: SCHEMA_VERSION,
        command: command.to_string(),
        fingerprint: config.fingerprint(),
        seed: outcome.prepared.federation.seed,
        config: config.doc.canonical(),
        sweep,
        f_hat_min: outcome.minimum.as_ref().map(MinimumInfo::from),
        final_metrics: outcome.metrics.last().cloned().expect("at least the initial round is recorded"),
        e_min,
        t_star,
        stability_final,
        rows: outcome.metrics.len(),
    })
}

pub fn write_run(out_dir: &Path, config: &ExperimentConfig, metrics: &[RoundMetrics], summary: &RunSummary) -> Result<(), CliError> {
    fs::create_dir_all(out_dir)?;
    write_metrics_csv(&out_dir.join(METRICS_FILE), metrics)?;
    fs::write(out_dir.join(CONFIG_FILE), config.doc.canonical())?;
    write_json(&out_dir.join(SUMMARY_FILE), summary)
}

pub fn cmd_run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary, CliError> {
    config.require_federation()?;
    let outcome = execute(config)?;
    let summary = summarize(config, "run", &outcome, None, None)?;
    write_run(out_dir, config, &outcome.metrics, &summary)?;
    Ok(summary)
}

pub fn probe_defaults(config: &ExperimentConfig) -> ProbeConfig {
    config.probe.clone().unwrap_or_default()
}
