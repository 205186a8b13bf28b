//! Generalization-dynamics measurements: coupled twin runs on neighbor
//! datasets, excess-risk curves and empirical estimates of the smoothness
//! and variance constants.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_neighbor, ClientSampler, ClientShard, GlobalDataset, NeighborPair, Replacement};
use crate::engine::{is_eval_round, Evaluator, Federation, FederationConfig, RoundMetrics};
use crate::error::{Error, Result};
use crate::model::{Label, ModelFamily, ModelSpec};
use crate::objective;
use crate::param::ParamVector;
use crate::rng::{label, Stream};

/// Additive floor inside log-trend fits.
pub const LOG_FLOOR: f64 = 1e-20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCurve {
    /// Indexed by round, `0..=T`.
    pub mean_sq_dist: Vec<f64>,
    pub stderr: Vec<f64>,
    pub replicates: usize,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TwinRun {
    pub sq_dist: Vec<f64>,
    pub base: Vec<RoundMetrics>,
    pub perturbed: Vec<RoundMetrics>,
}

/// What to evaluate along the two trajectories of a twin run.
#[derive(Clone, Copy, Default)]
pub struct TwinEval<'a> {
    pub metrics: bool,
    pub test: Option<&'a GlobalDataset>,
    pub f_hat_min: Option<f64>,
}

fn check_pair(pair: &NeighborPair, shards: &[ClientShard]) -> Result<()> {
    if pair.base.len() != pair.perturbed.len() {
        return Err(Error::Precondition(format!(
            "neighbor datasets differ in length ({} vs {})",
            pair.base.len(),
            pair.perturbed.len()
        )));
    }
    let owner = shards.get(pair.owner).filter(|s| s.client_id == pair.owner);
    match owner {
        Some(s) if s.indices.binary_search(&pair.j).is_ok() => Ok(()),
        _ => Err(Error::Precondition(format!("shard {} does not contain replaced index {}", pair.owner, pair.j))),
    }
}

/// Runs the engine on both datasets of `pair` with identical random streams
/// and records `||x^t - x~^t||^2` for every round `t = 0..=T`.
pub fn twin_run(
    config: &FederationConfig,
    pair: &NeighborPair,
    shards: &[ClientShard],
    spec: &ModelSpec,
    eval: TwinEval<'_>,
) -> Result<TwinRun> {
    check_pair(pair, shards)?;
    let mut a = Federation::new(config, spec, &pair.base, shards)?;
    let mut b = Federation::new(config, spec, &pair.perturbed, shards)?;
    let ev_a = Evaluator { spec, dataset: &pair.base, shards, test: eval.test, f_hat_min: eval.f_hat_min };
    let ev_b = Evaluator { spec, dataset: &pair.perturbed, shards, test: eval.test, f_hat_min: eval.f_hat_min };
    let mut out = TwinRun { sq_dist: Vec::with_capacity(config.rounds + 1), base: Vec::new(), perturbed: Vec::new() };
    for t in 0..=config.rounds {
        let dist = a.state().x.dist_sq(&b.state().x);
        out.sq_dist.push(dist);
        if eval.metrics && is_eval_round(t, config) {
            let eta = a.eta_g(t)?;
            let mut ma = ev_a.metrics(&a.state().x, t, eta)?;
            let mut mb = ev_b.metrics(&b.state().x, t, eta)?;
            ma.stability_sq = Some(dist);
            mb.stability_sq = Some(dist);
            out.base.push(ma);
            out.perturbed.push(mb);
        }
        if t < config.rounds {
            a.step()?;
            b.step()?;
        }
    }
    Ok(out)
}

/// Mean and standard error (sample standard deviation over `sqrt(J)`) per round.
pub fn average_curves(curves: &[Vec<f64>], indices: Vec<usize>) -> Result<StabilityCurve> {
    let j = curves.len();
    let len = curves.first().map(Vec::len).ok_or_else(|| Error::Precondition("no replicate curves".into()))?;
    let mut mean = vec![0.0; len];
    let mut stderr = vec![0.0; len];
    for t in 0..len {
        let m = curves.iter().fold(0.0, |acc, c| acc + c[t]) / j as f64;
        mean[t] = m;
        if j > 1 {
            let ss = curves.iter().fold(0.0, |acc, c| acc + (c[t] - m) * (c[t] - m));
            stderr[t] = (ss / (j - 1) as f64).sqrt() / (j as f64).sqrt();
        }
    }
    Ok(StabilityCurve { mean_sq_dist: mean, stderr, replicates: j, indices })
}

/// Replacement indices for an on-average stability estimate, ascending.
pub fn replacement_indices(n: usize, replicates: usize, seed: u64) -> Result<Vec<usize>> {
    if replicates == 0 || replicates > n {
        return Err(Error::Config(format!("replicate count J must lie in [1, {n}], got {replicates}")));
    }
    let mut rng = Stream::root(seed).child(label::PROBE).rng();
    let mut idx = index::sample(&mut rng, n, replicates).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Monte Carlo estimate of `(1/n) sum_j E||A(D^(j)) - A(D)||^2` over `J`
/// replacement indices drawn without replacement.
#[allow(clippy::too_many_arguments)]
pub fn on_average_stability(
    config: &FederationConfig,
    dataset: &GlobalDataset,
    shards: &[ClientShard],
    spec: &ModelSpec,
    sampler: &dyn ClientSampler,
    replicates: usize,
    seed: u64,
    replacement: Replacement,
) -> Result<StabilityCurve> {
    let indices = replacement_indices(dataset.len(), replicates, seed)?;
    let curves = twin_distances(config, dataset, shards, spec, sampler, &indices, seed, replacement)?;
    average_curves(&curves, indices)
}

/// One twin-run distance curve per replacement index. Replicates run in
/// parallel and are returned in index order.
#[allow(clippy::too_many_arguments)]
pub fn twin_distances(
    config: &FederationConfig,
    dataset: &GlobalDataset,
    shards: &[ClientShard],
    spec: &ModelSpec,
    sampler: &dyn ClientSampler,
    indices: &[usize],
    seed: u64,
    replacement: Replacement,
) -> Result<Vec<Vec<f64>>> {
    let neighbor_stream = Stream::root(seed).child(label::NEIGHBOR);
    indices
        .par_iter()
        .map(|&j| {
            let pair = make_neighbor(dataset, shards, sampler, j, neighbor_stream, replacement)?;
            Ok(twin_run(config, &pair, shards, spec, TwinEval::default())?.sq_dist)
        })
        .collect()
}

/// `||grad f(x)||^2` of the federated objective.
pub fn gradient_norm_sq(spec: &ModelSpec, dataset: &GlobalDataset, shards: &[ClientShard], x: &ParamVector) -> Result<f64> {
    Ok(objective::global_grad(spec, dataset, shards, x)?.norm_sq())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcessRiskCurve {
    pub rounds: Vec<usize>,
    pub excess: Vec<f64>,
    /// First round attaining the minimum.
    pub t_star: usize,
    pub e_min: f64,
}

pub fn excess_risk_curve(metrics: &[RoundMetrics], f_hat_min: f64) -> Result<ExcessRiskCurve> {
    if !f_hat_min.is_finite() {
        return Err(Error::Precondition(format!("f_hat_min must be finite, got {f_hat_min}")));
    }
    let mut rounds = Vec::with_capacity(metrics.len());
    let mut excess = Vec::with_capacity(metrics.len());
    for m in metrics {
        let test = m.test_loss.ok_or_else(|| Error::Precondition(format!("round {} has no test loss", m.t)))?;
        rounds.push(m.t);
        excess.push(test - f_hat_min);
    }
    let (pos, e_min) = excess
        .iter()
        .copied()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((i, v)),
        })
        .ok_or_else(|| Error::Precondition("no recorded rounds".into()))?;
    Ok(ExcessRiskCurve { t_star: rounds[pos], e_min, rounds, excess })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinimumStrategy {
    /// Exact normal-equations solution (linear regression).
    Analytic,
    /// Best loss of a long centralized gradient-descent run; an upper bound on `f(x_hat)`.
    ReferenceRun,
}

impl MinimumStrategy {
    pub fn tag(self) -> &'static str {
        match self {
            MinimumStrategy::Analytic => "analytic",
            MinimumStrategy::ReferenceRun => "reference_run",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMinimum {
    pub value: f64,
    pub params: ParamVector,
    pub strategy: MinimumStrategy,
    /// The reference run stopped on its budget rather than on stationarity.
    pub budget_limited: bool,
}

/// Gradient norm squared at which the reference run counts as converged.
const REFERENCE_TOL: f64 = 1e-24;

/// Minimum of the federated empirical objective.
pub fn estimate_empirical_minimum(spec: &ModelSpec, dataset: &GlobalDataset, shards: &[ClientShard], budget: usize) -> Result<EmpiricalMinimum> {
    if budget == 0 {
        return Err(Error::Config("reference-run budget must be >= 1".into()));
    }
    if spec.family == ModelFamily::LinearRegression {
        if let Some(w) = normal_equations(spec, dataset, shards) {
            let value = objective::global_loss(spec, dataset, shards, &w)?;
            return Ok(EmpiricalMinimum { value, params: w, strategy: MinimumStrategy::Analytic, budget_limited: false });
        }
    }
    reference_minimum(spec, dataset, shards, budget)
}

/// Solves the shard-weighted normal equations; `None` when the system is
/// numerically singular.
fn normal_equations(spec: &ModelSpec, dataset: &GlobalDataset, shards: &[ClientShard]) -> Option<ParamVector> {
    let d = spec.input_dim;
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    let n_clients = shards.len() as f64;
    for s in shards {
        let w = 1.0 / (n_clients * s.len() as f64);
        for z in dataset.select(&s.indices) {
            let Label::Target(y) = z.label else { return None };
            let x = DVector::from_column_slice(&z.features);
            a.ger(w, &x, &x, 1.0);
            rhs.axpy(w * y, &x, 1.0);
        }
    }
    for i in 0..d {
        a[(i, i)] += spec.weight_decay;
    }
    let scale = a.diagonal().amax();
    let chol = a.cholesky()?;
    let l = chol.l();
    let min_pivot = l.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if !(scale > 0.0) || min_pivot * min_pivot < 1e-12 * scale {
        return None;
    }
    let w = chol.solve(&rhs);
    w.iter().all(|v| v.is_finite()).then(|| ParamVector::from_vec(w.as_slice().to_vec()))
}

/// Full-batch gradient descent with Armijo backtracking from the model's
/// seed-0 initialization. The loss is monotone so the best value is the last.
pub fn reference_minimum(spec: &ModelSpec, dataset: &GlobalDataset, shards: &[ClientShard], budget: usize) -> Result<EmpiricalMinimum> {
    let mut x = spec.init_params(Stream::root(0).child(label::INIT));
    let mut f = objective::global_loss(spec, dataset, shards, &x)?;
    let mut step: f64 = 1.0;
    let mut budget_limited = true;
    for _ in 0..budget {
        let g = objective::global_grad(spec, dataset, shards, &x)?;
        let gg = g.norm_sq();
        if gg <= REFERENCE_TOL {
            budget_limited = false;
            break;
        }
        step = (step * 2.0).min(1e6);
        loop {
            let mut trial = x.clone();
            trial.axpy(-step, &g);
            let ft = objective::global_loss(spec, dataset, shards, &trial);
            match ft {
                Ok(ft) if ft <= f - 0.5 * step * gg => {
                    x = trial;
                    f = ft;
                    break;
                }
                Ok(_) | Err(Error::Numeric(_)) => {
                    step *= 0.5;
                    if step < 1e-30 {
                        return Ok(EmpiricalMinimum { value: f, params: x, strategy: MinimumStrategy::ReferenceRun, budget_limited: false });
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(EmpiricalMinimum { value: f, params: x, strategy: MinimumStrategy::ReferenceRun, budget_limited })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaEstimate {
    pub sigma_l_sq: f64,
    pub sigma_g_sq: f64,
    /// `(sigma_l_sq, sigma_g_sq)` at every probe point.
    pub per_point: Vec<(f64, f64)>,
}

/// Exact variance of a size-`b` minibatch gradient drawn without
/// replacement from a client's shard: `(v / b) (n - b) / (n - 1)` with `v`
/// the population variance of the per-example gradients.
pub fn minibatch_grad_variance(spec: &ModelSpec, dataset: &GlobalDataset, shard: &ClientShard, x: &ParamVector, b: usize) -> Result<f64> {
    let n = shard.len();
    if b == 0 || b > n {
        return Err(Error::Config(format!("batch size {b} must lie in [1, {n}] for client {}", shard.client_id)));
    }
    if n == 1 || b == n {
        return Ok(0.0);
    }
    let mean = objective::client_grad(spec, dataset, shard, x)?;
    let mut v = 0.0;
    for z in dataset.select(&shard.indices) {
        v += spec.grad(x, std::iter::once(z))?.dist_sq(&mean);
    }
    v /= n as f64;
    Ok(v / b as f64 * (n - b) as f64 / (n - 1) as f64)
}

pub fn estimate_sigmas(
    spec: &ModelSpec,
    dataset: &GlobalDataset,
    shards: &[ClientShard],
    probes: &[ParamVector],
    b: usize,
) -> Result<SigmaEstimate> {
    if probes.is_empty() {
        return Err(Error::Precondition("at least one probe point is required".into()));
    }
    if let Some(s) = shards.iter().find(|s| s.len() < b) {
        return Err(Error::Config(format!("batch size {b} exceeds the {} examples of client {}", s.len(), s.client_id)));
    }
    let mut per_point = Vec::with_capacity(probes.len());
    for x in probes {
        let mut local = 0.0;
        let mut grads = Vec::with_capacity(shards.len());
        for s in shards {
            local += minibatch_grad_variance(spec, dataset, s, x, b)?;
            grads.push(objective::client_grad(spec, dataset, s, x)?);
        }
        local /= shards.len() as f64;
        let mut global = ParamVector::zeros(x.len());
        for g in &grads {
            global.add_assign(g);
        }
        global.scale(1.0 / shards.len() as f64);
        let hetero = grads.iter().map(|g| g.dist_sq(&global)).fold(0.0, f64::max);
        per_point.push((local, hetero));
    }
    let sigma_l_sq = per_point.iter().map(|p| p.0).fold(0.0, f64::max);
    let sigma_g_sq = per_point.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(SigmaEstimate { sigma_l_sq, sigma_g_sq, per_point })
}

/// Lower bound on the smoothness constant of the federated objective:
/// `max ||grad f(x) - grad f(y)|| / ||x - y||` over pairs `y = x + radius u`.
///
/// Even pairs use a fresh Gaussian center and a random unit direction; each
/// odd pair keeps the previous center and follows the previous gradient
/// difference, a power-iteration step towards the top curvature direction.
pub fn estimate_smoothness(
    spec: &ModelSpec,
    dataset: &GlobalDataset,
    shards: &[ClientShard],
    num_pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<f64> {
    if num_pairs == 0 {
        return Err(Error::Config("num_pairs must be >= 1".into()));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!("radius must be > 0, got {radius}")));
    }
    let d = spec.dim();
    let stream = Stream::root(seed).child(label::SMOOTHNESS);
    let mut best: f64 = 0.0;
    let mut center = ParamVector::zeros(d);
    let mut g_center = ParamVector::zeros(d);
    let mut follow: Option<ParamVector> = None;
    for k in 0..num_pairs {
        let dir = match follow.take() {
            Some(u) if k % 2 == 1 && u.norm() > 0.0 => u,
            _ => {
                let mut rng = stream.indexed(label::PROBE, k as u64).rng();
                center = ParamVector::from_vec((0..d).map(|_| rng.sample(StandardNormal)).collect());
                g_center = objective::global_grad(spec, dataset, shards, &center)?;
                ParamVector::from_vec((0..d).map(|_| rng.sample(StandardNormal)).collect())
            }
        };
        let mut y = center.clone();
        y.axpy(radius / dir.norm(), &dir);
        let gy = objective::global_grad(spec, dataset, shards, &y)?;
        let diff = gy.sub(&g_center);
        let dx = y.dist_sq(&center).sqrt();
        if dx > 0.0 {
            best = best.max(diff.norm() / dx);
        }
        follow = Some(diff);
    }
    Ok(best)
}
