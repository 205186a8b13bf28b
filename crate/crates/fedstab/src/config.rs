//! Experiment configuration: `[federation]`, `[model]`, `[data]`, `[probe]`
//! and `[bounds]` sections of an INI file.

use std::path::{Path, PathBuf};

use fedstab_core::bounds::BoundInputs;
use fedstab_core::data::{Replacement, SyntheticSpec, Task};
use fedstab_core::engine::{FederationConfig, Schedule, ServerOpt};
use fedstab_core::model::ModelSpec;
use fedstab_core::{Error, Result};
use sha2::{Digest, Sha256};

use crate::ini::{IniDoc, Section};

pub const SECTIONS: [&str; 5] = ["federation", "model", "data", "probe", "bounds"];

const FEDERATION_KEYS: [&str; 15] = [
    "clients",
    "local_steps",
    "batch_size",
    "local_lr",
    "global_lr",
    "schedule",
    "schedule_c",
    "decay",
    "rounds",
    "participation",
    "server_opt",
    "beta",
    "nu",
    "seed",
    "eval_every",
];
const MODEL_KEYS: [&str; 3] = ["family", "hidden_dim", "weight_decay"];
const DATA_KEYS: [&str; 14] = [
    "source",
    "task",
    "classes",
    "input_dim",
    "per_client_n",
    "hetero",
    "noise",
    "label_skew",
    "partition",
    "alpha",
    "path",
    "test_path",
    "test_per_client",
    "seed",
];
const PROBE_KEYS: [&str; 9] = [
    "replicates",
    "indices",
    "seeds",
    "replacement",
    "min_strategy",
    "reference_budget",
    "sigma_batch",
    "smoothness_pairs",
    "smoothness_radius",
];
const BOUNDS_KEYS: [&str; 16] =
    ["L", "sigma_l_sq", "sigma_g_sq", "n", "K", "T", "c", "eta_l", "F_init", "beta", "nu", "gamma", "C", "mu", "b", "eta_g_cap"];

/// Minimum total size of a synthetic held-out set.
pub const MIN_TEST_SIZE: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub enum Partition {
    Contiguous,
    /// Label-Dirichlet split of a pooled sample.
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { spec: SyntheticSpec, partition: Partition, test_per_client: usize },
    Csv { path: PathBuf, test_path: Option<PathBuf>, partition: Partition },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MinStrategy {
    Auto,
    Analytic,
    ReferenceRun,
}

#[derive(Clone, Debug, PartialEq)]
pub enum IndexChoice {
    Sample,
    Fixed(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub replicates: usize,
    pub indices: IndexChoice,
    pub seeds: Vec<u64>,
    pub replacement: Replacement,
    pub min_strategy: MinStrategy,
    pub reference_budget: usize,
    pub sigma_batch: Option<usize>,
    pub smoothness_pairs: usize,
    pub smoothness_radius: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            replicates: 16,
            indices: IndexChoice::Sample,
            seeds: vec![0],
            replacement: Replacement::Fresh,
            min_strategy: MinStrategy::Auto,
            reference_budget: 2000,
            sigma_batch: None,
            smoothness_pairs: 200,
            smoothness_radius: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundsConfig {
    pub inputs: BoundInputs,
    /// Optional cap on `eta_g^t` in the recursions (`min(cap, sqrt(c/t))`).
    pub eta_g_cap: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub doc: IniDoc,
    pub federation: Option<FederationConfig>,
    pub model: Option<ModelSpec>,
    pub data: Option<DataConfig>,
    pub probe: Option<ProbeConfig>,
    pub bounds: Option<BoundsConfig>,
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub eval_every: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_text(&text, base, overrides)
    }

    /// `base_dir` resolves relative dataset paths.
    pub fn from_text(text: &str, base_dir: &Path, overrides: &Overrides) -> Result<Self> {
        let mut doc = IniDoc::parse(text)?;
        doc.check_sections(&SECTIONS)?;
        if let Some(seed) = overrides.seed {
            doc.set("federation", "seed", seed.to_string());
        }
        if let Some(e) = overrides.eval_every {
            doc.set("federation", "eval_every", e.to_string());
        }
        Self::from_doc(doc, base_dir)
    }

    pub fn from_doc(doc: IniDoc, base_dir: &Path) -> Result<Self> {
        doc.check_sections(&SECTIONS)?;
        let federation = doc.section("federation").map(|s| parse_federation(&s)).transpose()?;
        let model = doc.section("model").map(|s| parse_model(&s)).transpose()?;
        let data = match doc.section("data") {
            Some(s) => Some(parse_data(&s, base_dir, federation.as_ref())?),
            None => None,
        };
        let probe = doc.section("probe").map(|s| parse_probe(&s)).transpose()?;
        let bounds = doc.section("bounds").map(|s| parse_bounds(&s)).transpose()?;
        Ok(ExperimentConfig { doc, federation, model, data, probe, bounds })
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.doc.canonical().as_bytes()))
    }

    pub fn require_federation(&self) -> Result<&FederationConfig> {
        self.federation.as_ref().ok_or_else(|| Error::Config("missing [federation] section".into()))
    }

    pub fn require_model(&self) -> Result<&ModelSpec> {
        self.model.as_ref().ok_or_else(|| Error::Config("missing [model] section".into()))
    }

    pub fn require_data(&self) -> Result<&DataConfig> {
        self.data.as_ref().ok_or_else(|| Error::Config("missing [data] section".into()))
    }

    pub fn require_probe(&self) -> Result<&ProbeConfig> {
        self.probe.as_ref().ok_or_else(|| Error::Config("missing [probe] section".into()))
    }

    pub fn require_bounds(&self) -> Result<&BoundsConfig> {
        self.bounds.as_ref().ok_or_else(|| Error::Config("missing [bounds] section".into()))
    }
}

fn parse_federation(s: &Section<'_>) -> Result<FederationConfig> {
    s.check_keys(&FEDERATION_KEYS)?;
    let d = FederationConfig::default();
    let schedule = match s.str_or("schedule", "constant") {
        "constant" => Schedule::Constant,
        "inverse_sqrt" => Schedule::InverseSqrt { c: s.req_f64("schedule_c")? },
        "exponential" => Schedule::Exponential { epsilon: s.req_f64("decay")? },
        _ => return Err(s.invalid("schedule", "constant, inverse_sqrt or exponential")),
    };
    let server_opt = match s.str_or("server_opt", "sgd") {
        "sgd" => ServerOpt::Sgd,
        "momentum" => ServerOpt::Momentum { beta: s.req_f64("beta")?, nu: s.f64_or("nu", 1.0)? },
        _ => return Err(s.invalid("server_opt", "sgd or momentum")),
    };
    let cfg = FederationConfig {
        clients: s.usize_or("clients", d.clients)?,
        local_steps: s.usize_or("local_steps", d.local_steps)?,
        batch_size: s.usize_or("batch_size", d.batch_size)?,
        local_lr: s.f64_or("local_lr", d.local_lr)?,
        global_lr: s.f64_or("global_lr", d.global_lr)?,
        schedule,
        rounds: s.usize_or("rounds", d.rounds)?,
        participation: s.f64_or("participation", d.participation)?,
        server_opt,
        seed: s.u64_or("seed", d.seed)?,
        eval_every: s.usize_or("eval_every", d.eval_every)?,
    };
    cfg.validate().map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("[federation] {m}")),
        other => other,
    })?;
    Ok(cfg)
}

fn parse_model(s: &Section<'_>) -> Result<ModelSpec> {
    s.check_keys(&MODEL_KEYS)?;
    let wd = s.f64_or("weight_decay", 0.0)?;
    let family = match s.str_or("family", "logistic") {
        "linear" => ModelFamilyChoice::Linear,
        "logistic" => ModelFamilyChoice::Logistic,
        "mlp" => ModelFamilyChoice::Mlp { hidden_dim: s.usize_or("hidden_dim", 16)? },
        _ => return Err(s.invalid("family", "linear, logistic or mlp")),
    };
    Ok(ModelFamilyChoice::into_spec_placeholder(family, wd))
}

/// The model's input and class dimensions come from the data, so the
/// `[model]` section yields a spec with those filled in later.
#[derive(Clone, Copy, Debug)]
pub enum ModelFamilyChoice {
    Linear,
    Logistic,
    Mlp { hidden_dim: usize },
}

impl ModelFamilyChoice {
    fn into_spec_placeholder(self, weight_decay: f64) -> ModelSpec {
        match self {
            ModelFamilyChoice::Linear => ModelSpec::linear(0, weight_decay),
            ModelFamilyChoice::Logistic => ModelSpec::logistic(0, weight_decay),
            ModelFamilyChoice::Mlp { hidden_dim } => ModelSpec::mlp(0, hidden_dim, 0, weight_decay),
        }
    }
}

fn parse_partition(s: &Section<'_>) -> Result<Partition> {
    match s.str_or("partition", "contiguous") {
        "contiguous" => Ok(Partition::Contiguous),
        "dirichlet" => Ok(Partition::Dirichlet { alpha: s.req_f64("alpha")? }),
        _ => Err(s.invalid("partition", "contiguous or dirichlet")),
    }
}

fn parse_data(s: &Section<'_>, base_dir: &Path, fed: Option<&FederationConfig>) -> Result<DataConfig> {
    s.check_keys(&DATA_KEYS)?;
    let seed = s.u64_or("seed", fed.map_or(0, |f| f.seed))?;
    let partition = parse_partition(s)?;
    let source = match s.str_or("source", "synthetic") {
        "synthetic" => {
            let task = match s.str_or("task", "binary") {
                "regression" => Task::Regression,
                "binary" => Task::Binary,
                "multiclass" => Task::Multiclass { classes: s.req_usize("classes")? },
                _ => return Err(s.invalid("task", "regression, binary or multiclass")),
            };
            let clients = fed.map_or(1, |f| f.clients);
            let spec = SyntheticSpec {
                task,
                input_dim: s.usize_or("input_dim", 10)?,
                clients,
                per_client_n: s.usize_or("per_client_n", 50)?,
                hetero: s.f64_or("hetero", 0.5)?,
                noise: s.f64_or("noise", 0.1)?,
                label_skew: s.opt_f64("label_skew")?,
            };
            let default_test = MIN_TEST_SIZE.div_ceil(clients.max(1));
            let test_per_client = s.usize_or("test_per_client", default_test)?;
            if test_per_client == 0 {
                return Err(s.invalid("test_per_client", "a positive integer"));
            }
            DataSource::Synthetic { spec, partition, test_per_client }
        }
        "csv" => {
            let path = s.raw("path").ok_or_else(|| s.missing("path"))?;
            DataSource::Csv {
                path: base_dir.join(path),
                test_path: s.raw("test_path").map(|p| base_dir.join(p)),
                partition,
            }
        }
        _ => return Err(s.invalid("source", "synthetic or csv")),
    };
    Ok(DataConfig { source, seed })
}

fn parse_probe(s: &Section<'_>) -> Result<ProbeConfig> {
    s.check_keys(&PROBE_KEYS)?;
    let d = ProbeConfig::default();
    let indices = match s.raw("indices") {
        None | Some("sample") => IndexChoice::Sample,
        Some(_) => {
            let items = s.list("indices").unwrap_or_default();
            let parsed = items.iter().map(|v| v.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>();
            match parsed {
                Ok(v) if !v.is_empty() => IndexChoice::Fixed(v),
                _ => return Err(s.invalid("indices", "`sample` or a comma-separated list of indices")),
            }
        }
    };
    let seeds = match s.list("seeds") {
        None => d.seeds.clone(),
        Some(items) => {
            let parsed = items.iter().map(|v| v.parse::<u64>()).collect::<std::result::Result<Vec<_>, _>>();
            match parsed {
                Ok(v) if !v.is_empty() => v,
                _ => return Err(s.invalid("seeds", "a nonempty comma-separated list of integers")),
            }
        }
    };
    let replacement = match s.str_or("replacement", "fresh") {
        "fresh" => Replacement::Fresh,
        "original" => Replacement::Original,
        _ => return Err(s.invalid("replacement", "fresh or original")),
    };
    let min_strategy = match s.str_or("min_strategy", "auto") {
        "auto" => MinStrategy::Auto,
        "analytic" => MinStrategy::Analytic,
        "reference_run" => MinStrategy::ReferenceRun,
        _ => return Err(s.invalid("min_strategy", "auto, analytic or reference_run")),
    };
    let cfg = ProbeConfig {
        replicates: s.usize_or("replicates", d.replicates)?,
        indices,
        seeds,
        replacement,
        min_strategy,
        reference_budget: s.usize_or("reference_budget", d.reference_budget)?,
        sigma_batch: s.opt_usize("sigma_batch")?,
        smoothness_pairs: s.usize_or("smoothness_pairs", d.smoothness_pairs)?,
        smoothness_radius: s.f64_or("smoothness_radius", d.smoothness_radius)?,
    };
    if cfg.replicates == 0 {
        return Err(s.invalid("replicates", "a positive integer"));
    }
    if cfg.reference_budget == 0 {
        return Err(s.invalid("reference_budget", "a positive integer"));
    }
    Ok(cfg)
}

fn parse_bounds(s: &Section<'_>) -> Result<BoundsConfig> {
    s.check_keys(&BOUNDS_KEYS)?;
    let inputs = BoundInputs {
        l: s.req_f64("L")?,
        sigma_l_sq: s.req_f64("sigma_l_sq")?,
        sigma_g_sq: s.req_f64("sigma_g_sq")?,
        n: s.req_f64("n")?,
        k: s.req_usize("K")?,
        t: s.req_usize("T")?,
        c: s.req_f64("c")?,
        eta_l: s.req_f64("eta_l")?,
        f_init: s.req_f64("F_init")?,
        beta: s.f64_or("beta", 0.0)?,
        nu: s.f64_or("nu", 1.0)?,
        gamma: s.f64_or("gamma", 1.0)?,
        c_opt: s.opt_f64("C")?,
        mu: s.opt_f64("mu")?,
        b: s.usize_or("b", 1)?,
    };
    inputs.validate()?;
    let eta_g_cap = s.opt_f64("eta_g_cap")?;
    if let Some(cap) = eta_g_cap {
        if !(cap > 0.0) {
            return Err(s.invalid("eta_g_cap", "a positive number"));
        }
    }
    Ok(BoundsConfig { inputs, eta_g_cap })
}
