//! CSV and JSON writers. Floats use the shortest round-trip form so reruns
//! are byte-identical; absent values are empty CSV fields / JSON nulls.

use std::fs;
use std::path::Path;

use fedstab_core::engine::RoundMetrics;
use serde::Serialize;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn metrics_row(m: &RoundMetrics) -> Vec<String> {
    vec![
        m.t.to_string(),
        fmt_f64(m.train_loss),
        fmt_opt(m.test_loss),
        fmt_f64(m.grad_norm_sq),
        fmt_opt(m.gen_gap),
        fmt_opt(m.excess_risk),
        fmt_opt(m.stability_sq),
        fmt_f64(m.eta_g_t),
    ]
}

pub fn write_metrics_csv(path: &Path, metrics: &[RoundMetrics]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RoundMetrics::COLUMNS)?;
    for m in metrics {
        w.write_record(metrics_row(m))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<RoundMetrics>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != RoundMetrics::COLUMNS {
        return Err(CliError::Runtime(format!("{} does not have the metrics columns", path.display())));
    }
    let parse = |s: &str| -> Result<Option<f64>, CliError> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>().map(Some).map_err(|_| CliError::Runtime(format!("bad number `{s}` in {}", path.display())))
        }
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let t = rec[0].parse::<usize>().map_err(|_| CliError::Runtime(format!("bad round `{}` in {}", &rec[0], path.display())))?;
        out.push(RoundMetrics {
            t,
            train_loss: parse(&rec[1])?.unwrap_or(f64::NAN),
            test_loss: parse(&rec[2])?,
            grad_norm_sq: parse(&rec[3])?.unwrap_or(f64::NAN),
            gen_gap: parse(&rec[4])?,
            excess_risk: parse(&rec[5])?,
            stability_sq: parse(&rec[6])?,
            eta_g_t: parse(&rec[7])?.unwrap_or(f64::NAN),
        });
    }
    Ok(out)
}

/// Right-pads every column to its widest cell.
pub fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = vec![RoundMetrics {
            t: 5,
            train_loss: 0.1 + 0.2,
            test_loss: None,
            grad_norm_sq: 1e-300,
            gen_gap: Some(-0.0),
            excess_risk: None,
            stability_sq: Some(3.0),
            eta_g_t: 1.0,
        }];
        write_metrics_csv(&path, &m).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,train_loss,test_loss,grad_norm_sq,gen_gap,excess_risk,stability_sq,eta_g_t\n"));
        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(back[0].train_loss.to_bits(), m[0].train_loss.to_bits());
        assert_eq!(back[0].grad_norm_sq, 1e-300);
        assert_eq!(back[0].test_loss, None);
    }

    #[test]
    fn aligned_columns() {
        let s = aligned(&["a", "bbb"], &[vec!["long".into(), "1".into()]]);
        assert_eq!(s, "a     bbb\nlong  1\n");
    }
}
