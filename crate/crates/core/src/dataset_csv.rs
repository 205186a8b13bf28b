//! CSV dataset files.
//!
//! Header `x0,x1,...,x{d-1},<label>` where the final column is `label`
//! (integer class ids) or `target` (float regression targets). Floats are
//! written in Rust's shortest round-trip form, so save -> load is bit-exact.

use std::path::Path;

use crate::data::GlobalDataset;
use crate::error::{Error, Result};
use crate::model::{Example, Label};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CsvSchema {
    /// Expected feature count; checked against the header when set.
    pub input_dim: Option<usize>,
    /// Class count; inferred as `max(label) + 1` (at least 2) when unset.
    pub num_classes: Option<usize>,
}

pub fn save_csv(dataset: &GlobalDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = dataset.input_dim();
    let mut header: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
    header.push(if dataset.num_classes > 0 { "label".into() } else { "target".into() });
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(d + 1);
    for z in &dataset.examples {
        row.clear();
        row.extend(z.features.iter().map(|v| format!("{v:?}")));
        row.push(match z.label {
            Label::Class(c) => c.to_string(),
            Label::Target(y) => format!("{y:?}"),
        });
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>, schema: CsvSchema) -> Result<GlobalDataset> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path)?;
    let mut records = r.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(Error::Parse { line: 1, msg: "empty file, expected a header row".into() }),
    };
    if header.len() < 2 {
        return Err(Error::Parse { line: 1, msg: "header needs at least one feature column and a label column".into() });
    }
    let d = header.len() - 1;
    for (k, name) in header.iter().take(d).enumerate() {
        if name.trim() != format!("x{k}") {
            return Err(Error::Parse { line: 1, msg: format!("column {k} is named '{name}', expected 'x{k}'") });
        }
    }
    if let Some(expected) = schema.input_dim {
        if expected != d {
            let col = if d > expected { header.get(expected).unwrap_or("?").to_string() } else { format!("x{d}") };
            return Err(Error::Parse {
                line: 1,
                msg: format!("header has {d} feature columns but {expected} were declared (column '{col}')"),
            });
        }
    }
    let classes = match header.get(d).map(str::trim) {
        Some("label") => true,
        Some("target") => false,
        Some(other) => {
            return Err(Error::Parse { line: 1, msg: format!("last column '{other}' must be named 'label' or 'target'") })
        }
        None => unreachable!(),
    };

    let mut examples = Vec::new();
    for (k, rec) in records.enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if rec.len() != d + 1 {
            return Err(Error::Parse { line, msg: format!("expected {} fields, found {}", d + 1, rec.len()) });
        }
        let mut features = Vec::with_capacity(d);
        for (c, field) in rec.iter().take(d).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line, msg: format!("column 'x{c}': '{field}' is not a number") })?;
            features.push(v);
        }
        let field = rec.get(d).unwrap().trim();
        let label = if classes {
            Label::Class(field.parse().map_err(|_| Error::Parse { line, msg: format!("column 'label': '{field}' is not a class id") })?)
        } else {
            Label::Target(field.parse().map_err(|_| Error::Parse { line, msg: format!("column 'target': '{field}' is not a number") })?)
        };
        examples.push(Example::new(features, label));
    }
    if examples.is_empty() {
        return Err(Error::Parse { line: 2, msg: "no data rows".into() });
    }
    let num_classes = if classes {
        let max = examples.iter().filter_map(|z| z.label.class()).max().unwrap_or(0);
        schema.num_classes.unwrap_or((max + 1).max(2))
    } else {
        0
    };
    let tag = path.file_stem().map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    GlobalDataset::new(examples, num_classes, tag).map_err(|e| Error::Parse { line: 0, msg: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec, Task};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for task in [Task::Regression, Task::Multiclass { classes: 3 }] {
            let spec = SyntheticSpec { task, input_dim: 3, clients: 4, per_client_n: 25, hetero: 0.7, noise: 0.3, label_skew: None };
            let (data, _, _) = gen_synthetic(&spec, 8).unwrap();
            let path = dir.path().join("d.csv");
            save_csv(&data, &path).unwrap();
            let back = load_csv(&path, CsvSchema { input_dim: Some(3), num_classes: Some(data.num_classes) }).unwrap();
            assert_eq!(back.hamming(&data), 0);
            assert_eq!(back.num_classes, data.num_classes);
        }
    }

    #[test]
    fn empty_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(load_csv(&path, CsvSchema::default()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn header_dimension_mismatch_names_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        std::fs::write(&path, "x0,x1,x2,label\n1,2,3,0\n").unwrap();
        let err = load_csv(&path, CsvSchema { input_dim: Some(2), num_classes: None }).unwrap_err();
        assert!(err.to_string().contains("x2"), "{err}");
        std::fs::write(&path, "x0,feat,label\n1,2,0\n").unwrap();
        let err = load_csv(&path, CsvSchema::default()).unwrap_err();
        assert!(err.to_string().contains("feat"), "{err}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "x0,target\n1.5,2\n0.5,abc\n").unwrap();
        match load_csv(&path, CsvSchema::default()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("target"));
            }
            other => panic!("{other:?}"),
        }
    }
}
