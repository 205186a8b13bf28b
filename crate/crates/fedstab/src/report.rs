//! `fedstab report`: summary table and trend verdicts over finished runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::output::{aligned, fmt_opt, write_json, write_table, SCHEMA_VERSION};
use crate::run::{RunSummary, SUMMARY_FILE};
use crate::sweep::{SweepSummary, SWEEP_SUMMARY_FILE};
use crate::CliError;

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_JSON: &str = "trends.json";
const TABLE_COLUMNS: [&str; 10] =
    ["run", "axis", "value", "seed", "e_min", "t_star", "final_gen_gap", "final_test_loss", "stability_final", "fingerprint"];

/// Fraction of seeds in which decay must not lose to the constant rate.
pub const DECAY_WIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug)]
pub struct ReportRow {
    pub dir: PathBuf,
    pub summary: RunSummary,
}

/// Expands sweep directories into their successful cells and loads every
/// run summary; directories without one are skipped with a warning.
pub fn collect_runs(dirs: &[PathBuf]) -> Vec<ReportRow> {
    let mut out = Vec::new();
    for dir in dirs {
        let sweep_path = dir.join(SWEEP_SUMMARY_FILE);
        if sweep_path.exists() {
            match fs::read_to_string(&sweep_path).map_err(|e| e.to_string()).and_then(|t| {
                serde_json::from_str::<SweepSummary>(&t).map_err(|e| e.to_string())
            }) {
                Ok(s) => {
                    let cells: Vec<PathBuf> = s.cells.iter().filter(|c| c.ok).map(|c| dir.join(&c.dir)).collect();
                    out.extend(collect_runs(&cells));
                }
                Err(e) => eprintln!("warning: skipping {}: unreadable sweep summary ({e})", dir.display()),
            }
            continue;
        }
        let path = dir.join(SUMMARY_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => match serde_json::from_str::<RunSummary>(&text) {
                Ok(summary) => out.push(ReportRow { dir: dir.clone(), summary }),
                Err(e) => eprintln!("warning: skipping {}: malformed summary ({e})", dir.display()),
            },
            Err(_) => eprintln!("warning: skipping {}: no {SUMMARY_FILE}", dir.display()),
        }
    }
    out
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Skipped,
}

#[derive(Clone, Debug, Serialize)]
pub struct Trend {
    pub name: String,
    pub verdict: Verdict,
    /// `(axis value, median)` in increasing axis order.
    pub medians: Vec<(f64, f64)>,
    pub detail: String,
}

/// Per-axis-value medians of `metric` over seeds, in increasing axis order.
pub fn medians_by_value(rows: &[ReportRow], metric: impl Fn(&RunSummary) -> Option<f64>) -> Vec<(f64, f64)> {
    let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let Some(cell) = &r.summary.sweep else { continue };
        let Ok(v) = cell.value.parse::<f64>() else { continue };
        if let Some(m) = metric(&r.summary) {
            groups.entry(v.to_bits()).or_insert((v, Vec::new())).1.push(m);
        }
    }
    let mut out: Vec<(f64, f64)> = groups.into_values().map(|(v, mut ms)| (v, median(&mut ms))).collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

pub fn non_decreasing(medians: &[(f64, f64)]) -> bool {
    medians.windows(2).all(|w| w[1].1 >= w[0].1)
}

fn monotone_trend(name: &str, medians: Vec<(f64, f64)>, what: &str) -> Trend {
    if medians.len() < 2 {
        return Trend { name: name.into(), verdict: Verdict::Skipped, medians, detail: format!("fewer than two axis values with {what}") };
    }
    let ok = non_decreasing(&medians);
    let detail = format!("median {what} {} in the axis value", if ok { "is non-decreasing" } else { "decreases" });
    Trend { name: name.into(), verdict: if ok { Verdict::Pass } else { Verdict::Fail }, medians, detail }
}

fn final_gen_gap(s: &RunSummary) -> Option<f64> {
    s.final_metrics.gen_gap
}

fn final_test_loss(s: &RunSummary) -> Option<f64> {
    s.final_metrics.test_loss
}

/// Decay wins when its final test loss is at most the constant-rate
/// (`epsilon = 1`) loss of the same seed, in at least [`DECAY_WIN_FRACTION`] of seeds.
pub fn decay_trend(rows: &[ReportRow]) -> Trend {
    let name = "decay_stabilization".to_string();
    let mut by_value: BTreeMap<u64, (f64, BTreeMap<u64, f64>)> = BTreeMap::new();
    for r in rows {
        let (Some(cell), Some(loss)) = (&r.summary.sweep, final_test_loss(&r.summary)) else { continue };
        let Ok(v) = cell.value.parse::<f64>() else { continue };
        by_value.entry(v.to_bits()).or_insert((v, BTreeMap::new())).1.insert(cell.seed, loss);
    }
    let medians = medians_by_value(rows, final_test_loss);
    let Some((_, baseline)) = by_value.get(&1.0f64.to_bits()).cloned() else {
        return Trend { name, verdict: Verdict::Skipped, medians, detail: "no epsilon = 1 (constant rate) baseline".into() };
    };
    let mut parts = Vec::new();
    let mut ok = true;
    for (v, losses) in by_value.values().filter(|(v, _)| *v != 1.0) {
        let paired: Vec<bool> = losses.iter().filter_map(|(s, l)| baseline.get(s).map(|b| l <= b)).collect();
        let wins = paired.iter().filter(|w| **w).count();
        let frac = if paired.is_empty() { 0.0 } else { wins as f64 / paired.len() as f64 };
        ok &= frac >= DECAY_WIN_FRACTION;
        parts.push(format!("epsilon={v}: {wins}/{} seeds", paired.len()));
    }
    if parts.is_empty() {
        return Trend { name, verdict: Verdict::Skipped, medians, detail: "no decayed cells".into() };
    }
    Trend { name, verdict: if ok { Verdict::Pass } else { Verdict::Fail }, medians, detail: parts.join(", ") }
}

pub fn trends(rows: &[ReportRow]) -> Result<Vec<Trend>, CliError> {
    let mut axes: Vec<&str> = rows.iter().filter_map(|r| r.summary.sweep.as_ref().map(|c| c.axis.as_str())).collect();
    axes.sort_unstable();
    axes.dedup();
    if axes.len() > 1 {
        return Err(CliError::Config(format!("runs come from incompatible sweeps over axes {}", axes.join(" and "))));
    }
    Ok(match axes.first().copied() {
        Some("K") => vec![monotone_trend("monotone_in_K", medians_by_value(rows, final_gen_gap), "final gen_gap")],
        Some("beta") => vec![monotone_trend(
            "monotone_in_beta",
            medians_by_value(rows, |s| s.stability_final),
            "final stability distance",
        )],
        Some("epsilon") => vec![decay_trend(rows)],
        _ => Vec::new(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub runs: usize,
    pub trends: Vec<Trend>,
}

pub fn cmd_report(dirs: &[PathBuf], out_dir: &Path) -> Result<Report, CliError> {
    let rows = collect_runs(dirs);
    if rows.is_empty() {
        return Err(CliError::Config("no run summaries found in the given directories".into()));
    }
    let trends = trends(&rows)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let s = &r.summary;
            let cell = s.sweep.as_ref();
            vec![
                r.dir.display().to_string(),
                cell.map(|c| c.axis.clone()).unwrap_or_default(),
                cell.map(|c| c.value.clone()).unwrap_or_default(),
                s.seed.to_string(),
                fmt_opt(s.e_min),
                s.t_star.map(|t| t.to_string()).unwrap_or_default(),
                fmt_opt(s.final_metrics.gen_gap),
                fmt_opt(s.final_metrics.test_loss),
                fmt_opt(s.stability_final),
                s.fingerprint.clone(),
            ]
        })
        .collect();
    let mut text = aligned(&TABLE_COLUMNS, &table);
    for t in &trends {
        let verdict = match t.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Skipped => "SKIP",
        };
        let medians: Vec<String> = t.medians.iter().map(|(v, m)| format!("{v}: {m:.6e}")).collect();
        text.push_str(&format!("\n{verdict} {}: {} [medians {}]\n", t.name, t.detail, medians.join("; ")));
    }
    fs::create_dir_all(out_dir)?;
    write_table(&out_dir.join(REPORT_CSV), &TABLE_COLUMNS, &table)?;
    fs::write(out_dir.join(REPORT_TXT), &text)?;
    let report = Report { schema_version: SCHEMA_VERSION, runs: rows.len(), trends };
    write_json(&out_dir.join(REPORT_JSON), &report)?;
    print!("{text}");
    Ok(report)
}
