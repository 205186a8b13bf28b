//! The federated empirical objective `f(x) = (1/N) sum_i f_i(x)`, each `f_i`
//! the mean loss over client `i`'s shard.

use crate::data::{ClientShard, GlobalDataset};
use crate::error::Result;
use crate::model::ModelSpec;
use crate::param::ParamVector;

pub fn client_loss(spec: &ModelSpec, dataset: &GlobalDataset, shard: &ClientShard, x: &ParamVector) -> Result<f64> {
    spec.loss(x, dataset.select(&shard.indices))
}

pub fn client_grad(spec: &ModelSpec, dataset: &GlobalDataset, shard: &ClientShard, x: &ParamVector) -> Result<ParamVector> {
    spec.grad(x, dataset.select(&shard.indices))
}

pub fn global_loss(spec: &ModelSpec, dataset: &GlobalDataset, shards: &[ClientShard], x: &ParamVector) -> Result<f64> {
    let mut sum = 0.0;
    for s in shards {
        sum += client_loss(spec, dataset, s, x)?;
    }
    Ok(sum / shards.len() as f64)
}

pub fn global_grad(spec: &ModelSpec, dataset: &GlobalDataset, shards: &[ClientShard], x: &ParamVector) -> Result<ParamVector> {
    let mut g = ParamVector::zeros(spec.dim());
    for s in shards {
        g.add_assign(&client_grad(spec, dataset, s, x)?);
    }
    g.scale(1.0 / shards.len() as f64);
    Ok(g)
}

/// Plain mean loss over a whole dataset (used for held-out test sets whose
/// per-client blocks are equal-sized).
pub fn dataset_loss(spec: &ModelSpec, dataset: &GlobalDataset, x: &ParamVector) -> Result<f64> {
    spec.loss(x, &dataset.examples)
}
