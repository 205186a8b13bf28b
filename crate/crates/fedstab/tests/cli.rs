use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const SMALL: &str = "[federation]
clients = 4
local_steps = 2
batch_size = 4
local_lr = 0.05
rounds = 20
seed = 3
eval_every = 5

[model]
family = logistic

[data]
task = binary
input_dim = 4
per_client_n = 20
";

fn fedstab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedstab")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_expected_rows_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.ini", SMALL);
    let before = fs::read(&cfg).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = fedstab(&["run", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 20 / 5 + 1);
    assert!(csv.starts_with("t,train_loss,test_loss,grad_norm_sq,gen_gap,excess_risk,stability_sq,eta_g_t"));
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("summary.json")).unwrap(), fs::read(b.join("summary.json")).unwrap());
    assert_eq!(fs::read(&cfg).unwrap(), before);

    let c = dir.path().join("c");
    let o = fedstab(&["run", "--config", s(&cfg), "--out", s(&c), "--seed", "4", "--eval-every", "10"]);
    assert!(o.status.success());
    let other = fs::read_to_string(c.join("metrics.csv")).unwrap();
    assert_eq!(other.lines().count(), 1 + 20 / 10 + 1);
    assert_ne!(other.lines().nth(1), csv.lines().nth(1));
}

#[test]
fn missing_federation_section_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.ini", "[model]\nfamily = logistic\n");
    let o = fedstab(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("[federation]"), "{}", stderr(&o));

    let cfg = write(dir.path(), "typo.ini", &SMALL.replace("local_lr", "locl_lr"));
    let o = fedstab(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("locl_lr"));
}

#[test]
fn divergence_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("family = logistic", "family = linear").replace("task = binary", "task = regression").replace("local_lr = 0.05", "local_lr = 40");
    let cfg = write(dir.path(), "div.ini", &text);
    let o = fedstab(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("round"));
}

#[test]
fn probe_schema_and_degenerate_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "p.ini", &format!("{SMALL}\n[probe]\nreplicates = 1\nreplacement = original\n"));
    let out = dir.path().join("p");
    let o = fedstab(&["probe", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("stability.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,mean_sq_dist,stderr,grad_norm_sq,gen_gap,excess_risk");
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 21);
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap() == 0.0));
    for f in ["metrics.csv", "config.ini", "probe_summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn probe_default_fits_the_runtime_budget() {
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/probe.ini");
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = fedstab(&["probe", "--config", cfg, "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(60));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("probe_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
}

const BOUNDS: &str = "[bounds]
L = 1.0
sigma_l_sq = 0.5
sigma_g_sq = 0.2
n = 500
K = 5
T = 2000
c = 0.1
eta_l = 0.025
F_init = 1.0
beta = 0.0
gamma = 1.0
C = 2.0
b = 8
";

#[test]
fn bounds_zero_beta_files_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "b.ini", BOUNDS);
    let out = dir.path().join("o");
    let o = fedstab(&["bounds", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(out.join("envelope_sgd.csv")).unwrap(), fs::read(out.join("envelope_fosm.csv")).unwrap());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("bounds_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["warning_flags"]["overfitting_regime"], false);
}

#[test]
fn bounds_flags_overfitting_regime() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "b.ini", &BOUNDS.replace("c = 0.1", "c = 1.0"));
    let out = dir.path().join("o");
    let o = fedstab(&["bounds", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("bounds_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["warning_flags"]["overfitting_regime"], true);
    assert!(stderr(&o).contains("over-fitting"));
}

#[test]
fn bounds_missing_l_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "b.ini", &BOUNDS.replace("L = 1.0\n", ""));
    let o = fedstab(&["bounds", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`L`"), "{}", stderr(&o));
    let cfg = write(dir.path(), "neg.ini", &BOUNDS.replace("gamma = 1.0", "gamma = -1"));
    let o = fedstab(&["bounds", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gamma"));
}

fn sweep_plan(dir: &Path, values: &str) -> PathBuf {
    write(dir, "base.ini", SMALL);
    write(dir, "plan.ini", &format!("[plan]\nbase_config = base.ini\naxis = K\nvalues = {values}\nseeds = 0, 1\nout = sweep\n"))
}

#[test]
fn sweep_bookkeeping_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let plan = sweep_plan(dir.path(), "1, 2, 4");
    let out = dir.path().join("sweep");
    let o = fedstab(&["sweep", "--config", s(&plan), "--out", s(&out), "--workers", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut cell_rows = 0;
    for k in ["1", "2", "4"] {
        for seed in [0, 1] {
            let csv = fs::read_to_string(out.join(format!("K={k}_seed={seed}")).join("metrics.csv")).unwrap();
            cell_rows += csv.lines().count() - 1;
        }
    }
    let merged = fs::read_to_string(out.join("merged.csv")).unwrap();
    assert_eq!(merged.lines().count() - 1, cell_rows);
    assert!(merged.starts_with("axis,value,seed,t,"));

    let rep = dir.path().join("rep");
    let o = fedstab(&["report", s(&out), "--out", s(&rep)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(rep.join("report.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 6);
    assert!(String::from_utf8_lossy(&o.stdout).contains("monotone_in_K"));
}

#[test]
fn sweep_rejects_empty_axis() {
    let dir = tempfile::tempdir().unwrap();
    let plan = sweep_plan(dir.path(), "");
    let o = fedstab(&["sweep", "--config", s(&plan), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn report_single_run_and_mixed_axes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.ini", SMALL);
    let run = dir.path().join("run");
    assert!(fedstab(&["run", "--config", s(&cfg), "--out", s(&run)]).status.success());
    let rep = dir.path().join("rep");
    let o = fedstab(&["report", s(&run), "--out", s(&rep)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(rep.join("report.csv")).unwrap().lines().count(), 2);

    let k = dir.path().join("k");
    let b = dir.path().join("b");
    write(dir.path(), "base.ini", SMALL);
    let pk = write(dir.path(), "pk.ini", "[plan]\nbase_config = base.ini\naxis = K\nvalues = 1, 2\nseeds = 0\n");
    let pb = write(dir.path(), "pb.ini", "[plan]\nbase_config = base.ini\naxis = beta\nvalues = 0.1, 0.5\nseeds = 0\n");
    assert!(fedstab(&["sweep", "--config", s(&pk), "--out", s(&k)]).status.success());
    assert!(fedstab(&["sweep", "--config", s(&pb), "--out", s(&b)]).status.success());
    let o = fedstab(&["report", s(&k), s(&b), "--out", s(&rep)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("K") && err.contains("beta"), "{err}");
}
