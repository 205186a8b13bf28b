//! `fedstab sweep`: one axis times a list of seeds, each cell a full run.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SECTIONS};
use crate::ini::IniDoc;
use crate::output::{metrics_row, write_json, write_table, SCHEMA_VERSION};
use crate::probe_cmd::final_stability;
use crate::run::{execute, summarize, write_run, SweepCell};
use crate::CliError;

pub const MERGED_FILE: &str = "merged.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    K,
    Beta,
    Epsilon,
    EtaG,
}

impl Axis {
    pub fn parse(s: &str) -> Option<Axis> {
        match s {
            "K" => Some(Axis::K),
            "beta" => Some(Axis::Beta),
            "epsilon" => Some(Axis::Epsilon),
            "eta_g" => Some(Axis::EtaG),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::K => "K",
            Axis::Beta => "beta",
            Axis::Epsilon => "epsilon",
            Axis::EtaG => "eta_g",
        }
    }

    /// Writes `value` into the `[federation]` keys this axis controls.
    pub fn apply(self, doc: &mut IniDoc, value: &str) {
        match self {
            Axis::K => doc.set("federation", "local_steps", value),
            Axis::Beta => {
                doc.set("federation", "server_opt", "momentum");
                doc.set("federation", "beta", value);
            }
            Axis::Epsilon => {
                doc.set("federation", "schedule", "exponential");
                doc.set("federation", "decay", value);
            }
            Axis::EtaG => doc.set("federation", "global_lr", value),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub base_config: PathBuf,
    pub axis: Axis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    /// Also measure twin-run stability in every cell (needs `[probe]` in the base config).
    pub probe: bool,
}

const PLAN_KEYS: [&str; 6] = ["base_config", "axis", "values", "seeds", "out", "probe"];

impl ExperimentPlan {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read plan {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or_else(|| Path::new(".")))
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let doc = IniDoc::parse(text)?;
        doc.check_sections(&["plan"])?;
        let s = doc.section("plan").ok_or_else(|| CliError::Config("missing [plan] section".into()))?;
        s.check_keys(&PLAN_KEYS)?;
        let base_config = base_dir.join(s.raw("base_config").ok_or_else(|| s.missing("base_config"))?);
        let axis_name = s.raw("axis").ok_or_else(|| s.missing("axis"))?;
        let axis = Axis::parse(axis_name).ok_or_else(|| s.invalid("axis", "one of K, beta, epsilon, eta_g"))?;
        let values = s.list("values").unwrap_or_default();
        if values.is_empty() {
            return Err(CliError::Config("[plan] values: the sweep axis list is empty".into()));
        }
        for v in &values {
            let ok = match axis {
                Axis::K => v.parse::<usize>().is_ok(),
                _ => v.parse::<f64>().is_ok(),
            };
            if !ok {
                return Err(CliError::Config(format!("[plan] values: `{v}` is not a valid {} value", axis.name())));
            }
        }
        let seeds = s
            .list("seeds")
            .unwrap_or_default()
            .iter()
            .map(|v| v.parse::<u64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| CliError::Config("[plan] seeds must be integers".into()))?;
        if seeds.is_empty() {
            return Err(CliError::Config("[plan] seeds must be a nonempty list".into()));
        }
        Ok(ExperimentPlan {
            base_config,
            axis,
            values,
            seeds,
            out: s.raw("out").map(|o| base_dir.join(o)),
            probe: s.bool_or("probe", false)?,
        })
    }
}

pub fn cell_dir_name(axis: Axis, value: &str, seed: u64) -> String {
    format!("{}={value}_seed={seed}", axis.name())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellStatus {
    pub dir: String,
    pub cell: SweepCell,
    pub ok: bool,
    pub error: Option<String>,
    pub rows: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema_version: u32,
    pub command: String,
    pub axis: Axis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellStatus>,
    pub failed: usize,
}

struct CellResult {
    status: CellStatus,
    rows: Vec<Vec<String>>,
}

fn run_cell(cfg: &ExperimentConfig, cell: &SweepCell, dir: &Path, with_probe: bool) -> Result<Vec<Vec<String>>, CliError> {
    let outcome = execute(cfg)?;
    let stability = if with_probe {
        let probe = cfg.require_probe()?;
        Some(final_stability(&outcome.prepared, probe)?)
    } else {
        None
    };
    let summary = summarize(cfg, "sweep", &outcome, Some(cell.clone()), stability)?;
    let mut metrics = outcome.metrics.clone();
    if let (Some(s), Some(last)) = (stability, metrics.last_mut()) {
        last.stability_sq = Some(s);
    }
    write_run(dir, cfg, &metrics, &summary)?;
    Ok(metrics
        .iter()
        .map(|m| {
            let mut row = vec![cell.axis.clone(), cell.value.clone(), cell.seed.to_string()];
            row.extend(metrics_row(m));
            row
        })
        .collect())
}

/// Runs every cell of `plan` on a pool of `workers` threads. Cell failures
/// are recorded, not fatal; the summary counts them.
pub fn cmd_sweep(plan: &ExperimentPlan, out_dir: &Path, workers: Option<usize>) -> Result<SweepSummary, CliError> {
    let text = fs::read_to_string(&plan.base_config)
        .map_err(|e| CliError::Config(format!("cannot read base config {}: {e}", plan.base_config.display())))?;
    let base_dir = plan.base_config.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let base = IniDoc::parse(&text)?;
    base.check_sections(&SECTIONS)?;
    if !base.has_section("federation") {
        return Err(CliError::Config("base config: missing [federation] section".into()));
    }

    // Validate every cell before running any.
    let mut cells = Vec::new();
    for value in &plan.values {
        for &seed in &plan.seeds {
            let mut doc = base.clone();
            plan.axis.apply(&mut doc, value);
            doc.set("federation", "seed", seed.to_string());
            let cfg = ExperimentConfig::from_doc(doc, &base_dir)
                .map_err(|e| CliError::Config(format!("cell {}={value} seed={seed}: {e}", plan.axis.name())))?;
            if plan.probe {
                cfg.require_probe()?;
            }
            let cell = SweepCell { axis: plan.axis.name().to_string(), value: value.clone(), seed };
            cells.push((cfg, cell));
        }
    }

    fs::create_dir_all(out_dir)?;
    let results: Vec<CellResult> = crate::with_workers(workers, || {
        cells
            .par_iter()
            .map(|(cfg, cell)| {
                let name = cell_dir_name(plan.axis, &cell.value, cell.seed);
                match run_cell(cfg, cell, &out_dir.join(&name), plan.probe) {
                    Ok(rows) => CellResult {
                        status: CellStatus { dir: name, cell: cell.clone(), ok: true, error: None, rows: rows.len() },
                        rows,
                    },
                    Err(e) => CellResult {
                        status: CellStatus { dir: name, cell: cell.clone(), ok: false, error: Some(e.to_string()), rows: 0 },
                        rows: Vec::new(),
                    },
                }
            })
            .collect()
    })?;

    let mut header = vec!["axis", "value", "seed"];
    header.extend(fedstab_core::engine::RoundMetrics::COLUMNS);
    let merged: Vec<Vec<String>> = results.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    write_table(&out_dir.join(MERGED_FILE), &header, &merged)?;
    let statuses: Vec<CellStatus> = results.into_iter().map(|r| r.status).collect();
    let failed = statuses.iter().filter(|s| !s.ok).count();
    for s in statuses.iter().filter(|s| !s.ok) {
        eprintln!("cell {} failed: {}", s.dir, s.error.as_deref().unwrap_or(""));
    }
    let summary = SweepSummary {
        schema_version: SCHEMA_VERSION,
        command: "sweep".into(),
        axis: plan.axis,
        values: plan.values.clone(),
        seeds: plan.seeds.clone(),
        cells: statuses,
        failed,
    };
    write_json(&out_dir.join(SWEEP_SUMMARY_FILE), &summary)?;
    Ok(summary)
}
