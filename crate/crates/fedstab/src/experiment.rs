//! Turns a parsed configuration into datasets, shards and a model.

use fedstab_core::data::{
    dirichlet_partition, gen_synthetic, ClientSampler, ClientShard, EmpiricalSampler, GlobalDataset, ShardLabelSampler,
    SyntheticSpec,
};
use fedstab_core::dataset_csv::{load_csv, CsvSchema};
use fedstab_core::engine::FederationConfig;
use fedstab_core::model::{ModelFamily, ModelSpec};
use fedstab_core::probe::{estimate_empirical_minimum, reference_minimum, EmpiricalMinimum, MinimumStrategy};
use fedstab_core::rng::Stream;
use fedstab_core::{Error, Result};

use crate::config::{DataConfig, DataSource, ExperimentConfig, MinStrategy, Partition, ProbeConfig};

pub struct Prepared {
    pub federation: FederationConfig,
    pub spec: ModelSpec,
    pub dataset: GlobalDataset,
    pub shards: Vec<ClientShard>,
    pub test: Option<GlobalDataset>,
    pub sampler: Box<dyn ClientSampler>,
}

/// Splits `[0, n)` into `clients` contiguous blocks whose sizes differ by at most one.
pub fn contiguous_shards(n: usize, clients: usize) -> Result<Vec<ClientShard>> {
    if clients == 0 || clients > n {
        return Err(Error::Config(format!("cannot split {n} examples across {clients} clients")));
    }
    let mut out = Vec::with_capacity(clients);
    let mut start = 0;
    for i in 0..clients {
        let len = n / clients + usize::from(i < n % clients);
        out.push(ClientShard { client_id: i, indices: (start..start + len).collect() });
        start += len;
    }
    Ok(out)
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Precondition(m) => Error::Config(m),
        other => other,
    }
}

fn build_data(data: &DataConfig, clients: usize) -> Result<(GlobalDataset, Vec<ClientShard>, Option<GlobalDataset>, Box<dyn ClientSampler>)> {
    match &data.source {
        DataSource::Synthetic { spec, partition, test_per_client } => {
            let spec = SyntheticSpec { clients, ..spec.clone() };
            let test_stream = Stream::root(data.seed);
            match partition {
                Partition::Contiguous => {
                    let (dataset, shards, generator) = gen_synthetic(&spec, data.seed)?;
                    let test = generator.test_set(*test_per_client, test_stream, dataset.num_classes)?;
                    Ok((dataset, shards, Some(test), Box::new(generator)))
                }
                Partition::Dirichlet { alpha } => {
                    let pooled = SyntheticSpec { clients: 1, per_client_n: clients * spec.per_client_n, ..spec.clone() };
                    let (dataset, _, generator) = gen_synthetic(&pooled, data.seed)?;
                    let shards = dirichlet_partition(&dataset, clients, *alpha, data.seed).map_err(as_config)?;
                    let sampler = ShardLabelSampler::new(generator, 0, &dataset, &shards)?;
                    let test = sampler.test_set(*test_per_client, test_stream, dataset.num_classes)?;
                    Ok((dataset, shards, Some(test), Box::new(sampler)))
                }
            }
        }
        DataSource::Csv { path, test_path, partition } => {
            let dataset = load_csv(path, CsvSchema::default())?;
            let shards = match partition {
                Partition::Contiguous => contiguous_shards(dataset.len(), clients)?,
                Partition::Dirichlet { alpha } => dirichlet_partition(&dataset, clients, *alpha, data.seed).map_err(as_config)?,
            };
            let test = match test_path {
                Some(p) => {
                    let schema = CsvSchema { input_dim: Some(dataset.input_dim()), num_classes: Some(dataset.num_classes) };
                    Some(load_csv(p, schema)?)
                }
                None => None,
            };
            let sampler = EmpiricalSampler { dataset: dataset.clone(), shards: shards.clone() };
            Ok((dataset, shards, test, Box::new(sampler)))
        }
    }
}

/// Fills the data-dependent dimensions of the configured model.
pub fn finalize_model(placeholder: &ModelSpec, dataset: &GlobalDataset) -> Result<ModelSpec> {
    let mut spec = placeholder.clone();
    spec.input_dim = dataset.input_dim();
    match spec.family {
        ModelFamily::LinearRegression if dataset.num_classes != 0 => {
            return Err(Error::Config("linear regression needs real-valued targets".into()))
        }
        ModelFamily::LogisticRegression if dataset.num_classes != 2 => {
            return Err(Error::Config(format!("logistic regression needs 2 classes, data has {}", dataset.num_classes)))
        }
        ModelFamily::Mlp { .. } => spec.num_classes = dataset.num_classes,
        _ => {}
    }
    spec.validate()?;
    Ok(spec)
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let federation = config.require_federation()?.clone();
    let placeholder = config.require_model()?;
    let data = config.require_data()?;
    let (dataset, shards, test, sampler) = build_data(data, federation.clients)?;
    let spec = finalize_model(placeholder, &dataset)?;
    Ok(Prepared { federation, spec, dataset, shards, test, sampler })
}

/// `f_hat_min` per the configured strategy.
pub fn empirical_minimum(prep: &Prepared, probe: &ProbeConfig) -> Result<EmpiricalMinimum> {
    let budget = probe.reference_budget;
    if probe.min_strategy == MinStrategy::ReferenceRun {
        return reference_minimum(&prep.spec, &prep.dataset, &prep.shards, budget);
    }
    let est = estimate_empirical_minimum(&prep.spec, &prep.dataset, &prep.shards, budget)?;
    if probe.min_strategy == MinStrategy::Analytic && est.strategy != MinimumStrategy::Analytic {
        return Err(Error::Config("min_strategy = analytic needs linear regression with a nonsingular design".into()));
    }
    Ok(est)
}
