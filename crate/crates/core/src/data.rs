//! Global datasets, client shards and neighbor-dataset construction.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, Label};
use crate::rng::{label, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalDataset {
    pub examples: Vec<Example>,
    /// 0 for regression targets.
    pub num_classes: usize,
    pub tag: String,
}

impl GlobalDataset {
    pub fn new(examples: Vec<Example>, num_classes: usize, tag: impl Into<String>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Config("dataset must contain at least one example".into()));
        }
        let dim = examples[0].features.len();
        if let Some(k) = examples.iter().position(|z| z.features.len() != dim) {
            return Err(Error::Config(format!("example {k} has {} features, expected {dim}", examples[k].features.len())));
        }
        if num_classes > 0 {
            if let Some(k) = examples.iter().position(|z| !matches!(z.label, Label::Class(c) if c < num_classes)) {
                return Err(Error::Config(format!("example {k} has label {:?}, expected a class id < {num_classes}", examples[k].label)));
            }
        }
        Ok(GlobalDataset { examples, num_classes, tag: tag.into() })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.examples.first().map_or(0, |z| z.features.len())
    }

    pub fn select<'a>(&'a self, indices: &'a [usize]) -> impl Iterator<Item = &'a Example> + Clone + 'a {
        indices.iter().map(move |&i| &self.examples[i])
    }

    /// Number of positions at which the two datasets differ bitwise.
    pub fn hamming(&self, other: &GlobalDataset) -> usize {
        let common = self.examples.iter().zip(&other.examples).filter(|(a, b)| !a.bits_eq(b)).count();
        common + self.len().abs_diff(other.len())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    /// Global indices, ascending.
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Checks that shards are nonempty, pairwise disjoint and cover `[0, n)`.
pub fn validate_shards(shards: &[ClientShard], n: usize) -> Result<()> {
    if shards.is_empty() {
        return Err(Error::Config("at least one client shard is required".into()));
    }
    let mut seen = vec![false; n];
    for (i, s) in shards.iter().enumerate() {
        if s.client_id != i {
            return Err(Error::Config(format!("shard at position {i} has client_id {}", s.client_id)));
        }
        if s.is_empty() {
            return Err(Error::Config(format!("client {i} has an empty shard")));
        }
        for &j in &s.indices {
            if j >= n {
                return Err(Error::Config(format!("client {i} references index {j} outside [0, {n})")));
            }
            if std::mem::replace(&mut seen[j], true) {
                return Err(Error::Config(format!("index {j} appears in more than one shard")));
            }
        }
    }
    if let Some(j) = seen.iter().position(|s| !s) {
        return Err(Error::Config(format!("index {j} is not assigned to any client")));
    }
    Ok(())
}

/// Owner of global index `j`.
pub fn owner_of(shards: &[ClientShard], j: usize) -> Option<usize> {
    shards.iter().find(|s| s.indices.binary_search(&j).is_ok()).map(|s| s.client_id)
}

/// Draws fresh examples from a client's data distribution.
pub trait ClientSampler: Send + Sync {
    fn sample(&self, client: usize, rng: &mut ChaCha8Rng) -> Example;

    fn num_clients(&self) -> usize;

    /// A test set with `per_client` draws from every client, so that its plain
    /// mean weights clients equally.
    fn test_set(&self, per_client: usize, stream: Stream, num_classes: usize) -> Result<GlobalDataset> {
        let mut examples = Vec::with_capacity(per_client * self.num_clients());
        for i in 0..self.num_clients() {
            let mut rng = stream.indexed(label::TEST_SET, i as u64).rng();
            examples.extend((0..per_client).map(|_| self.sample(i, &mut rng)));
        }
        GlobalDataset::new(examples, num_classes, "test")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Task {
    Regression,
    Binary,
    Multiclass { classes: usize },
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Regression => 0,
            Task::Binary => 2,
            Task::Multiclass { classes } => classes,
        }
    }

    fn outputs(self) -> usize {
        match self {
            Task::Regression | Task::Binary => 1,
            Task::Multiclass { classes } => classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub task: Task,
    pub input_dim: usize,
    pub clients: usize,
    pub per_client_n: usize,
    /// Scale of the per-client shift of the ground-truth parameter.
    pub hetero: f64,
    /// Standard deviation of the label noise.
    pub noise: f64,
    /// Per-client class priors drawn from Dirichlet(alpha) (classification only).
    pub label_skew: Option<f64>,
}

/// Per-client ground truth `w_i = w_0 + hetero * u_i` with unit directions `u_i`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticGenerator {
    pub task: Task,
    pub input_dim: usize,
    pub noise: f64,
    /// Row-major `outputs x input_dim` matrix per client.
    pub client_params: Vec<Vec<f64>>,
    pub class_priors: Option<Vec<Vec<f64>>>,
}

const MAX_REJECTIONS: usize = 100_000;

impl SyntheticGenerator {
    fn raw_sample(&self, client: usize, rng: &mut ChaCha8Rng) -> Example {
        let d = self.input_dim;
        let features: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let w = &self.client_params[client];
        let score = |row: usize, rng: &mut ChaCha8Rng| {
            let s = w[row * d..(row + 1) * d].iter().zip(&features).fold(0.0, |acc, (a, b)| acc + a * b);
            let e: f64 = rng.sample(StandardNormal);
            s + self.noise * e
        };
        let label = match self.task {
            Task::Regression => Label::Target(score(0, rng)),
            Task::Binary => Label::Class(usize::from(score(0, rng) > 0.0)),
            Task::Multiclass { classes } => {
                let mut best = (0, f64::NEG_INFINITY);
                for c in 0..classes {
                    let s = score(c, rng);
                    if s > best.1 {
                        best = (c, s);
                    }
                }
                Label::Class(best.0)
            }
        };
        Example::new(features, label)
    }

    /// True (noise-free) parameter row block of a client.
    pub fn true_params(&self, client: usize) -> &[f64] {
        &self.client_params[client]
    }
}

impl ClientSampler for SyntheticGenerator {
    fn sample(&self, client: usize, rng: &mut ChaCha8Rng) -> Example {
        let Some(priors) = &self.class_priors else {
            return self.raw_sample(client, rng);
        };
        let want = sample_categorical(&priors[client], rng);
        let mut z = self.raw_sample(client, rng);
        for _ in 0..MAX_REJECTIONS {
            if z.label == Label::Class(want) {
                break;
            }
            z = self.raw_sample(client, rng);
        }
        z
    }

    fn num_clients(&self) -> usize {
        self.client_params.len()
    }
}

/// Samples client `i` from its shard's empirical class frequencies, with
/// features drawn from the class-conditional distribution of a pooled
/// generator. Matches the data distribution induced by a label-Dirichlet
/// partition of pooled data.
#[derive(Clone, Debug)]
pub struct ShardLabelSampler {
    pub base: SyntheticGenerator,
    pub pool_client: usize,
    pub class_freq: Vec<Vec<f64>>,
}

impl ShardLabelSampler {
    pub fn new(base: SyntheticGenerator, pool_client: usize, dataset: &GlobalDataset, shards: &[ClientShard]) -> Result<Self> {
        if dataset.num_classes == 0 {
            return Err(Error::Config("label-conditional sampling needs a classification dataset".into()));
        }
        let class_freq = shards
            .iter()
            .map(|s| {
                let mut f = vec![0.0; dataset.num_classes];
                for z in dataset.select(&s.indices) {
                    if let Label::Class(c) = z.label {
                        f[c] += 1.0;
                    }
                }
                f
            })
            .collect();
        Ok(ShardLabelSampler { base, pool_client, class_freq })
    }
}

impl ClientSampler for ShardLabelSampler {
    fn sample(&self, client: usize, rng: &mut ChaCha8Rng) -> Example {
        let want = sample_categorical(&self.class_freq[client], rng);
        let mut z = self.base.raw_sample(self.pool_client, rng);
        for _ in 0..MAX_REJECTIONS {
            if z.label == Label::Class(want) {
                break;
            }
            z = self.base.raw_sample(self.pool_client, rng);
        }
        z
    }

    fn num_clients(&self) -> usize {
        self.class_freq.len()
    }
}

/// Resamples uniformly from a client's own shard: the empirical
/// distribution, for datasets without a known generator.
#[derive(Clone, Debug)]
pub struct EmpiricalSampler {
    pub dataset: GlobalDataset,
    pub shards: Vec<ClientShard>,
}

impl ClientSampler for EmpiricalSampler {
    fn sample(&self, client: usize, rng: &mut ChaCha8Rng) -> Example {
        let idx = &self.shards[client].indices;
        self.dataset.examples[idx[rng.random_range(0..idx.len())]].clone()
    }

    fn num_clients(&self) -> usize {
        self.shards.len()
    }
}

fn sample_categorical(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (c, w) in weights.iter().enumerate() {
        if u < *w {
            return c;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn dirichlet(alpha: f64, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("invalid Dirichlet alpha {alpha}: {e}")))?;
    let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 && total.is_finite() {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        p.iter_mut().for_each(|v| *v = 1.0 / k as f64);
    }
    Ok(p)
}

fn unit_direction(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates a federated dataset; client `i` owns the contiguous block
/// `[i * per_client_n, (i + 1) * per_client_n)`.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(GlobalDataset, Vec<ClientShard>, SyntheticGenerator)> {
    if spec.clients == 0 || spec.per_client_n == 0 || spec.input_dim == 0 {
        return Err(Error::Config("clients, per_client_n and input_dim must all be >= 1".into()));
    }
    if !(spec.hetero >= 0.0 && spec.noise >= 0.0) {
        return Err(Error::Config("hetero and noise must be nonnegative".into()));
    }
    if let Task::Multiclass { classes } = spec.task {
        if classes < 2 {
            return Err(Error::Config("multiclass task needs at least 2 classes".into()));
        }
    }
    if spec.label_skew.is_some() && spec.task == Task::Regression {
        return Err(Error::Config("label_skew requires a classification task".into()));
    }
    let root = Stream::root(seed).child(label::DATA);
    let width = spec.task.outputs() * spec.input_dim;
    let mut rng = root.child(0).rng();
    let base: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
    let client_params = (0..spec.clients)
        .map(|i| {
            let mut r = root.indexed(1, i as u64).rng();
            let u = unit_direction(width, &mut r);
            base.iter().zip(&u).map(|(b, u)| b + spec.hetero * u).collect()
        })
        .collect();
    let class_priors = match spec.label_skew {
        Some(alpha) => {
            let k = spec.task.num_classes();
            let priors = (0..spec.clients)
                .map(|i| dirichlet(alpha, k, &mut root.indexed(2, i as u64).rng()))
                .collect::<Result<Vec<_>>>()?;
            Some(priors)
        }
        None => None,
    };
    let generator = SyntheticGenerator { task: spec.task, input_dim: spec.input_dim, noise: spec.noise, client_params, class_priors };

    let mut examples = Vec::with_capacity(spec.clients * spec.per_client_n);
    let mut shards = Vec::with_capacity(spec.clients);
    for i in 0..spec.clients {
        let mut r = root.indexed(3, i as u64).rng();
        let start = examples.len();
        examples.extend((0..spec.per_client_n).map(|_| generator.sample(i, &mut r)));
        shards.push(ClientShard { client_id: i, indices: (start..examples.len()).collect() });
    }
    let tag = format!("synthetic:{:?}:hetero={}:noise={}", spec.task, spec.hetero, spec.noise);
    let dataset = GlobalDataset::new(examples, spec.task.num_classes(), tag)?;
    Ok((dataset, shards, generator))
}

/// Splits a labeled dataset across `clients` with per-class client
/// proportions drawn from Dirichlet(alpha). Empty shards are repaired by
/// moving one example from the currently largest shard.
pub fn dirichlet_partition(dataset: &GlobalDataset, clients: usize, alpha: f64, seed: u64) -> Result<Vec<ClientShard>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("Dirichlet alpha must be > 0, got {alpha}")));
    }
    if clients == 0 {
        return Err(Error::Config("number of clients must be >= 1".into()));
    }
    if clients > dataset.len() {
        return Err(Error::Config(format!("{clients} clients exceed {} examples", dataset.len())));
    }
    if dataset.num_classes == 0 {
        return Err(Error::Precondition("Dirichlet partitioning needs class labels".into()));
    }
    let stream = Stream::root(seed).child(label::PARTITION);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (j, z) in dataset.examples.iter().enumerate() {
        if let Label::Class(c) = z.label {
            by_class[c].push(j);
        }
    }
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut rng = stream.child(c as u64).rng();
        members.shuffle(&mut rng);
        let p = dirichlet(alpha, clients, &mut rng)?;
        let n_c = members.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (i, share) in p.iter().enumerate() {
            cum += share;
            let end = if i + 1 == clients { n_c } else { ((cum * n_c as f64).floor() as usize).clamp(start, n_c) };
            assigned[i].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    for s in &mut assigned {
        s.sort_unstable();
    }
    while let Some(empty) = assigned.iter().position(Vec::is_empty) {
        let largest = (0..clients).max_by_key(|&i| (assigned[i].len(), std::cmp::Reverse(i))).unwrap();
        let moved = assigned[largest].pop().expect("largest shard is nonempty when clients <= n");
        assigned[empty].push(moved);
    }
    Ok(assigned.into_iter().enumerate().map(|(client_id, indices)| ClientShard { client_id, indices }).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Replacement {
    /// Fresh i.i.d. draw from the owner's distribution.
    Fresh,
    /// The original sample (degenerate pair, used to test the coupling).
    Original,
}

#[derive(Clone, Debug)]
pub struct NeighborPair {
    pub base: GlobalDataset,
    pub perturbed: GlobalDataset,
    pub j: usize,
    pub owner: usize,
}

/// Copies `dataset` with example `j` replaced by a draw from its owner's distribution.
pub fn make_neighbor(
    dataset: &GlobalDataset,
    shards: &[ClientShard],
    sampler: &dyn ClientSampler,
    j: usize,
    stream: Stream,
    replacement: Replacement,
) -> Result<NeighborPair> {
    if j >= dataset.len() {
        return Err(Error::Precondition(format!("replacement index {j} outside [0, {})", dataset.len())));
    }
    let owner = owner_of(shards, j).ok_or_else(|| Error::Precondition(format!("index {j} is not owned by any shard")))?;
    let mut perturbed = dataset.clone();
    if replacement == Replacement::Fresh {
        let mut rng = stream.indexed(label::NEIGHBOR, j as u64).rng();
        perturbed.examples[j] = sampler.sample(owner, &mut rng);
    }
    Ok(NeighborPair { base: dataset.clone(), perturbed, j, owner })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: Task, hetero: f64, noise: f64) -> SyntheticSpec {
        SyntheticSpec { task, input_dim: 4, clients: 5, per_client_n: 20, hetero, noise, label_skew: None }
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let s = spec(Task::Binary, 0.5, 0.1);
        let (a, sa, _) = gen_synthetic(&s, 3).unwrap();
        let (b, sb, _) = gen_synthetic(&s, 3).unwrap();
        let (c, _, _) = gen_synthetic(&s, 4).unwrap();
        assert_eq!(a.hamming(&b), 0);
        assert_eq!(sa, sb);
        assert!(a.hamming(&c) > 0);
        validate_shards(&sa, a.len()).unwrap();
    }

    #[test]
    fn noiseless_regression_fits_own_parameter() {
        let (data, shards, generator) = gen_synthetic(&spec(Task::Regression, 1.0, 0.0), 9).unwrap();
        let model = crate::model::ModelSpec::linear(4, 0.0);
        for s in &shards {
            let w = crate::param::ParamVector::from_vec(generator.true_params(s.client_id).to_vec());
            let l = model.loss(&w, data.select(&s.indices)).unwrap();
            assert!(l < 1e-28, "client {} loss {l}", s.client_id);
        }
    }

    #[test]
    fn hetero_zero_shares_parameters() {
        let (_, _, generator) = gen_synthetic(&spec(Task::Binary, 0.0, 0.3), 1).unwrap();
        for i in 1..5 {
            assert_eq!(generator.client_params[i], generator.client_params[0]);
        }
    }

    #[test]
    fn label_skew_concentrates_classes() {
        let mut s = spec(Task::Multiclass { classes: 4 }, 0.0, 0.0);
        s.label_skew = Some(0.05);
        s.per_client_n = 50;
        let (data, shards, _) = gen_synthetic(&s, 11).unwrap();
        // with alpha this small most clients see one dominant class
        let dominant = shards
            .iter()
            .filter(|sh| {
                let mut counts = [0usize; 4];
                for z in data.select(&sh.indices) {
                    counts[z.label.class().unwrap()] += 1;
                }
                *counts.iter().max().unwrap() >= 40
            })
            .count();
        assert!(dominant >= 3, "{dominant}");
    }

    #[test]
    fn single_client_partition_is_everything() {
        let (data, _, _) = gen_synthetic(&spec(Task::Binary, 0.0, 0.0), 2).unwrap();
        let shards = dirichlet_partition(&data, 1, 0.1, 5).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].indices, (0..data.len()).collect::<Vec<_>>());
    }

    #[test]
    fn too_many_clients_is_config_error() {
        let (data, _, _) = gen_synthetic(&spec(Task::Binary, 0.0, 0.0), 2).unwrap();
        assert!(matches!(dirichlet_partition(&data, data.len() + 1, 0.1, 5), Err(Error::Config(_))));
        assert!(matches!(dirichlet_partition(&data, 3, 0.0, 5), Err(Error::Config(_))));
    }

    #[test]
    fn extreme_alpha_still_gives_nonempty_shards() {
        let (data, _, _) = gen_synthetic(&spec(Task::Binary, 0.0, 0.0), 2).unwrap();
        for seed in 0..20 {
            let shards = dirichlet_partition(&data, 40, 0.01, seed).unwrap();
            validate_shards(&shards, data.len()).unwrap();
        }
    }

    #[test]
    fn neighbor_differs_in_exactly_one_place() {
        let (data, shards, generator) = gen_synthetic(&spec(Task::Regression, 0.3, 0.1), 2).unwrap();
        for j in 0..data.len() {
            let pair = make_neighbor(&data, &shards, &generator, j, Stream::root(1), Replacement::Fresh).unwrap();
            assert_eq!(pair.base.hamming(&pair.perturbed), 1);
            assert!(!pair.base.examples[j].bits_eq(&pair.perturbed.examples[j]));
            assert_eq!(pair.owner, j / 20);
            assert!(shards[pair.owner].indices.contains(&j));
        }
    }

    #[test]
    fn degenerate_neighbor_is_identical() {
        let (data, shards, generator) = gen_synthetic(&spec(Task::Binary, 0.3, 0.1), 2).unwrap();
        let pair = make_neighbor(&data, &shards, &generator, 7, Stream::root(1), Replacement::Original).unwrap();
        assert_eq!(pair.base.hamming(&pair.perturbed), 0);
        let err = make_neighbor(&data, &shards, &generator, data.len(), Stream::root(1), Replacement::Fresh).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn shard_label_sampler_keeps_label_mix() {
        let s = SyntheticSpec { task: Task::Binary, input_dim: 3, clients: 1, per_client_n: 400, hetero: 0.0, noise: 0.5, label_skew: None };
        let (pool, _, generator) = gen_synthetic(&s, 4).unwrap();
        let shards = dirichlet_partition(&pool, 8, 0.1, 4).unwrap();
        let sampler = ShardLabelSampler::new(generator, 0, &pool, &shards).unwrap();
        let mut rng = Stream::root(0).rng();
        for (i, f) in sampler.class_freq.iter().enumerate() {
            if f[1] == 0.0 {
                for _ in 0..20 {
                    assert_eq!(sampler.sample(i, &mut rng).label, Label::Class(0));
                }
            }
        }
    }
}
