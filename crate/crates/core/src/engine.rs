//! Federated optimization with server SGD or server momentum.
//!
//! Each round the server samples participants, every participant runs `K`
//! mini-batch SGD steps from the broadcast model and uploads
//! `d_i = x^{t,0} - x^{t,K}`, the server averages the uploads in client-index
//! order and applies either `x <- x - eta_g^t d` or the heavy-ball update
//! `m <- beta m + nu d; x <- x - eta_g^t m`.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{validate_shards, ClientShard, GlobalDataset};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::objective;
use crate::param::ParamVector;
use crate::rng::{label, Stream};

/// Parameter norm above which a run is aborted as divergent.
pub const DIVERGENCE_NORM: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    Constant,
    /// `min(base, sqrt(c / max(t, 1)))`
    InverseSqrt { c: f64 },
    /// `base * epsilon^t`
    Exponential { epsilon: f64 },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Constant => Ok(()),
            Schedule::InverseSqrt { c } if c > 0.0 && c.is_finite() => Ok(()),
            Schedule::InverseSqrt { c } => Err(Error::Config(format!("inverse_sqrt constant c must be > 0, got {c}"))),
            Schedule::Exponential { epsilon } if epsilon > 0.0 && epsilon <= 1.0 => Ok(()),
            Schedule::Exponential { epsilon } => Err(Error::Config(format!("decay epsilon must lie in (0, 1], got {epsilon}"))),
        }
    }
}

/// Global learning rate used in round `t`.
pub fn lr_schedule(schedule: Schedule, base: f64, t: usize) -> Result<f64> {
    schedule.validate()?;
    Ok(match schedule {
        Schedule::Constant => base,
        Schedule::InverseSqrt { c } => base.min((c / t.max(1) as f64).sqrt()),
        Schedule::Exponential { epsilon } => base * epsilon.powf(t as f64),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ServerOpt {
    Sgd,
    Momentum { beta: f64, nu: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub clients: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub local_lr: f64,
    pub global_lr: f64,
    pub schedule: Schedule,
    pub rounds: usize,
    pub participation: f64,
    pub server_opt: ServerOpt,
    pub seed: u64,
    /// Full-batch metrics are computed every `eval_every` rounds (and at the last round).
    pub eval_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients: 10,
            local_steps: 5,
            batch_size: 8,
            local_lr: 0.05,
            global_lr: 1.0,
            schedule: Schedule::Constant,
            rounds: 100,
            participation: 1.0,
            server_opt: ServerOpt::Sgd,
            seed: 0,
            eval_every: 5,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.clients == 0 {
            return fail("clients must be >= 1".into());
        }
        if self.local_steps == 0 {
            return fail("local_steps (K) must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            return fail(format!("local_lr must be > 0, got {}", self.local_lr));
        }
        if !(self.global_lr > 0.0 && self.global_lr.is_finite()) {
            return fail(format!("global_lr must be > 0, got {}", self.global_lr));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return fail(format!("participation must lie in (0, 1], got {}", self.participation));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be >= 1".into());
        }
        if let ServerOpt::Momentum { beta, nu } = self.server_opt {
            if !(0.0..1.0).contains(&beta) {
                return fail(format!("momentum beta must lie in [0, 1), got {beta}"));
            }
            if !(nu > 0.0 && nu.is_finite()) {
                return fail(format!("momentum nu must be > 0, got {nu}"));
            }
        }
        self.schedule.validate()
    }

    /// `ceil(participation * N)`, guarded against representation error in the product.
    pub fn participants_per_round(&self) -> usize {
        let raw = self.participation * self.clients as f64;
        ((raw - 1e-9).ceil() as usize).clamp(1, self.clients)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub x: ParamVector,
    /// Momentum buffer; stays zero under server SGD.
    pub m: ParamVector,
    pub t: usize,
}

impl ServerState {
    pub fn new(x: ParamVector) -> Self {
        let m = ParamVector::zeros(x.len());
        ServerState { x, m, t: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub t: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub grad_norm_sq: f64,
    pub gen_gap: Option<f64>,
    pub excess_risk: Option<f64>,
    pub stability_sq: Option<f64>,
    pub eta_g_t: f64,
}

impl RoundMetrics {
    pub const COLUMNS: [&'static str; 8] =
        ["t", "train_loss", "test_loss", "grad_norm_sq", "gen_gap", "excess_risk", "stability_sq", "eta_g_t"];
}

/// Runs `K` local SGD steps and returns the accumulated update `x_start - x_K`.
///
/// The update is accumulated as the sum of the applied steps `eta_l * g_k`,
/// which equals `x_start - x_K` in exact arithmetic. Each step draws `b`
/// shard positions uniformly without replacement from its own substream;
/// the batch is visited in ascending index order.
#[allow(clippy::too_many_arguments)]
pub fn local_sgd(
    spec: &ModelSpec,
    dataset: &GlobalDataset,
    shard: &ClientShard,
    x_start: &ParamVector,
    local_steps: usize,
    batch_size: usize,
    local_lr: f64,
    stream: Stream,
) -> Result<ParamVector> {
    let n_i = shard.len();
    if batch_size > n_i {
        return Err(Error::Config(format!(
            "batch size {batch_size} exceeds the {n_i} examples of client {}",
            shard.client_id
        )));
    }
    let mut x = x_start.clone();
    let mut delta = ParamVector::zeros(x.len());
    let mut positions = Vec::with_capacity(batch_size);
    for k in 0..local_steps {
        let mut rng = stream.indexed(label::LOCAL_STEP, k as u64).rng();
        positions.clear();
        positions.extend(index::sample(&mut rng, n_i, batch_size).into_iter());
        positions.sort_unstable();
        let batch = positions.iter().map(|&p| &dataset.examples[shard.indices[p]]);
        let g = spec.grad(&x, batch).map_err(|e| e.with_context(format_args!("client {} step {k}", shard.client_id)))?;
        let step = g.scaled(local_lr);
        x.axpy(-1.0, &step);
        delta.add_assign(&step);
    }
    Ok(delta)
}

/// Arithmetic mean in slice order.
pub fn aggregate(deltas: &[ParamVector]) -> Result<ParamVector> {
    let (first, rest) = deltas.split_first().ok_or_else(|| Error::Precondition("no participants to aggregate".into()))?;
    let mut sum = first.clone();
    for d in rest {
        if d.len() != sum.len() {
            return Err(Error::Precondition(format!("update dimension {} differs from {}", d.len(), sum.len())));
        }
        sum.add_assign(d);
    }
    let m = deltas.len() as f64;
    for v in sum.as_mut_slice() {
        *v /= m;
    }
    Ok(sum)
}

fn check_dims(state: &ServerState, d: &ParamVector) -> Result<()> {
    if state.x.len() != d.len() || state.m.len() != d.len() {
        return Err(Error::Precondition(format!("server dimension {} does not match update dimension {}", state.x.len(), d.len())));
    }
    Ok(())
}

/// `x' = x - eta * d`
pub fn server_sgd_step(state: &ServerState, d: &ParamVector, eta: f64) -> Result<ServerState> {
    check_dims(state, d)?;
    let mut x = state.x.clone();
    for (xi, di) in x.as_mut_slice().iter_mut().zip(d.as_slice()) {
        *xi -= eta * di;
    }
    Ok(ServerState { x, m: state.m.clone(), t: state.t + 1 })
}

/// `m' = beta m + nu d; x' = x - eta m'`
pub fn server_momentum_step(state: &ServerState, d: &ParamVector, beta: f64, nu: f64, eta: f64) -> Result<ServerState> {
    check_dims(state, d)?;
    let m = ParamVector::from_vec(state.m.as_slice().iter().zip(d.as_slice()).map(|(m, d)| beta * m + nu * d).collect());
    let mut x = state.x.clone();
    for (xi, mi) in x.as_mut_slice().iter_mut().zip(m.as_slice()) {
        *xi -= eta * mi;
    }
    Ok(ServerState { x, m, t: state.t + 1 })
}

/// A running federation over one dataset. Two instances built from the same
/// config share every random draw, which is what couples twin runs.
pub struct Federation<'a> {
    pub config: &'a FederationConfig,
    pub spec: &'a ModelSpec,
    pub dataset: &'a GlobalDataset,
    pub shards: &'a [ClientShard],
    state: ServerState,
    root: Stream,
}

impl<'a> Federation<'a> {
    pub fn new(config: &'a FederationConfig, spec: &'a ModelSpec, dataset: &'a GlobalDataset, shards: &'a [ClientShard]) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        validate_shards(shards, dataset.len())?;
        if shards.len() != config.clients {
            return Err(Error::Config(format!("config has {} clients but {} shards were given", config.clients, shards.len())));
        }
        if dataset.input_dim() != spec.input_dim {
            return Err(Error::Config(format!("dataset has {} features, model expects {}", dataset.input_dim(), spec.input_dim)));
        }
        if let Some(s) = shards.iter().find(|s| s.len() < config.batch_size) {
            return Err(Error::Config(format!("batch size {} exceeds the {} examples of client {}", config.batch_size, s.len(), s.client_id)));
        }
        let root = Stream::root(config.seed);
        let x0 = spec.init_params(root.child(label::INIT));
        Ok(Federation { config, spec, dataset, shards, state: ServerState::new(x0), root })
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    pub fn round(&self) -> usize {
        self.state.t
    }

    pub fn eta_g(&self, t: usize) -> Result<f64> {
        lr_schedule(self.config.schedule, self.config.global_lr, t)
    }

    /// Participating clients of round `t`, ascending.
    pub fn participants(&self, t: usize) -> Vec<usize> {
        let n = self.config.clients;
        let m = self.config.participants_per_round();
        if m == n {
            return (0..n).collect();
        }
        let mut rng = self.root.indexed(label::PARTICIPATION, t as u64).rng();
        let mut chosen = index::sample(&mut rng, n, m).into_vec();
        chosen.sort_unstable();
        chosen
    }

    /// Runs one round and returns the participants.
    pub fn step(&mut self) -> Result<Vec<usize>> {
        let t = self.state.t;
        let participants = self.participants(t);
        let round = self.root.indexed(label::ROUND, t as u64);
        let cfg = self.config;
        let x = &self.state.x;
        let deltas = participants
            .par_iter()
            .map(|&i| {
                local_sgd(
                    self.spec,
                    self.dataset,
                    &self.shards[i],
                    x,
                    cfg.local_steps,
                    cfg.batch_size,
                    cfg.local_lr,
                    round.indexed(label::CLIENT, i as u64),
                )
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.with_context(format_args!("round {t}")))?;
        let d = aggregate(&deltas)?;
        let eta = self.eta_g(t)?;
        let next = match cfg.server_opt {
            ServerOpt::Sgd => server_sgd_step(&self.state, &d, eta)?,
            ServerOpt::Momentum { beta, nu } => server_momentum_step(&self.state, &d, beta, nu, eta)?,
        };
        if !next.x.is_finite() {
            return Err(Error::Numeric(format!("round {t}: non-finite parameters")));
        }
        let norm = next.x.norm();
        if norm > DIVERGENCE_NORM {
            return Err(Error::Numeric(format!("round {t}: parameter norm {norm:.3e} exceeds {DIVERGENCE_NORM:e}")));
        }
        self.state = next;
        Ok(participants)
    }
}

/// Computes [`RoundMetrics`] for server iterates.
pub struct Evaluator<'a> {
    pub spec: &'a ModelSpec,
    pub dataset: &'a GlobalDataset,
    pub shards: &'a [ClientShard],
    pub test: Option<&'a GlobalDataset>,
    pub f_hat_min: Option<f64>,
}

impl Evaluator<'_> {
    pub fn metrics(&self, x: &ParamVector, t: usize, eta_g_t: f64) -> Result<RoundMetrics> {
        let ctx = |e: Error| e.with_context(format_args!("round {t} evaluation"));
        let train_loss = objective::global_loss(self.spec, self.dataset, self.shards, x).map_err(ctx)?;
        let grad_norm_sq = objective::global_grad(self.spec, self.dataset, self.shards, x).map_err(ctx)?.norm_sq();
        let test_loss = match self.test {
            Some(test) => Some(objective::dataset_loss(self.spec, test, x).map_err(ctx)?),
            None => None,
        };
        let gen_gap = test_loss.map(|f| f - train_loss);
        let excess_risk = match (test_loss, self.f_hat_min) {
            (Some(f), Some(min)) => Some(f - min),
            _ => None,
        };
        Ok(RoundMetrics { t, train_loss, test_loss, grad_norm_sq, gen_gap, excess_risk, stability_sq: None, eta_g_t })
    }
}

pub fn is_eval_round(t: usize, config: &FederationConfig) -> bool {
    t % config.eval_every == 0 || t == config.rounds
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub final_state: ServerState,
}

/// Runs all `T` rounds, recording metrics at the configured cadence.
pub fn run_federated(
    config: &FederationConfig,
    spec: &ModelSpec,
    dataset: &GlobalDataset,
    shards: &[ClientShard],
    test: Option<&GlobalDataset>,
    f_hat_min: Option<f64>,
) -> Result<RunOutput> {
    let mut fed = Federation::new(config, spec, dataset, shards)?;
    let eval = Evaluator { spec, dataset, shards, test, f_hat_min };
    let mut metrics = Vec::new();
    for t in 0..=config.rounds {
        if is_eval_round(t, config) {
            metrics.push(eval.metrics(&fed.state().x, t, fed.eta_g(t)?)?);
        }
        if t < config.rounds {
            fed.step()?;
        }
    }
    Ok(RunOutput { metrics, final_state: fed.state().clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Example, Label};

    fn quad_1d() -> (ModelSpec, GlobalDataset, Vec<ClientShard>) {
        let spec = ModelSpec::linear(1, 0.0);
        let data = GlobalDataset::new(vec![Example::new(vec![1.0], Label::Target(1.0))], 0, "q").unwrap();
        let shards = vec![ClientShard { client_id: 0, indices: vec![0] }];
        (spec, data, shards)
    }

    #[test]
    fn local_sgd_hand_iterations() {
        let (spec, data, shards) = quad_1d();
        let x0 = ParamVector::zeros(1);
        let s = Stream::root(0);
        let d1 = local_sgd(&spec, &data, &shards[0], &x0, 1, 1, 0.1, s).unwrap();
        assert!((d1[0] + 0.1).abs() < 1e-15);
        let d2 = local_sgd(&spec, &data, &shards[0], &x0, 2, 1, 0.1, s).unwrap();
        assert!((d2[0] + 0.19).abs() < 1e-15);
    }

    #[test]
    fn local_sgd_at_stationary_point_is_zero() {
        let (spec, data, shards) = quad_1d();
        let d = local_sgd(&spec, &data, &shards[0], &ParamVector::from_vec(vec![1.0]), 7, 1, 0.3, Stream::root(4)).unwrap();
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn oversized_batch_is_config_error() {
        let (spec, data, shards) = quad_1d();
        let err = local_sgd(&spec, &data, &shards[0], &ParamVector::zeros(1), 1, 2, 0.1, Stream::root(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn aggregate_examples() {
        let a = ParamVector::from_vec(vec![1.0, 2.0]);
        let b = ParamVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(aggregate(&[a.clone(), b]).unwrap().as_slice(), &[2.0, 3.0]);
        assert!(aggregate(std::slice::from_ref(&a)).unwrap().bits_eq(&a));
        assert!(matches!(aggregate(&[]), Err(Error::Precondition(_))));
    }

    #[test]
    fn server_steps_by_hand() {
        let s = ServerState::new(ParamVector::from_vec(vec![1.0, 1.0]));
        let d = ParamVector::from_vec(vec![1.0, 2.0]);
        let next = server_sgd_step(&s, &d, 0.1).unwrap();
        assert_eq!(next.x.as_slice(), &[0.9, 0.8]);
        assert_eq!(next.t, 1);
        assert!(server_sgd_step(&s, &d, 0.0).unwrap().x.bits_eq(&s.x));
        let fedavg = server_sgd_step(&s, &d, 1.0).unwrap();
        assert_eq!(fedavg.x.as_slice(), &[0.0, -1.0]);

        let mut s = s;
        s.m = ParamVector::from_vec(vec![0.5, 0.0]);
        let next = server_momentum_step(&s, &d, 0.5, 1.0, 0.1).unwrap();
        assert_eq!(next.m.as_slice(), &[1.25, 2.0]);
        assert_eq!(next.x.as_slice(), &[0.875, 0.8]);
    }

    #[test]
    fn momentum_without_drive_decays_geometrically() {
        let mut s = ServerState::new(ParamVector::from_vec(vec![0.0, 0.0]));
        s.m = ParamVector::from_vec(vec![3.0, 4.0]);
        let zero = ParamVector::zeros(2);
        let beta: f64 = 0.5;
        for t in 1..=10 {
            s = server_momentum_step(&s, &zero, beta, 1.0, 0.1).unwrap();
            assert!((s.m.norm() - beta.powi(t) * 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_beta_zero_matches_sgd_bitwise() {
        let s = ServerState::new(ParamVector::from_vec(vec![0.3, -1.7]));
        let d = ParamVector::from_vec(vec![0.11, 2.9]);
        let a = server_sgd_step(&s, &d, 0.37).unwrap();
        let b = server_momentum_step(&s, &d, 0.0, 1.0, 0.37).unwrap();
        assert!(a.x.bits_eq(&b.x));
    }

    #[test]
    fn schedules() {
        assert_eq!(lr_schedule(Schedule::InverseSqrt { c: 1.0 }, 1.0, 4).unwrap(), 0.5);
        assert_eq!(lr_schedule(Schedule::InverseSqrt { c: 1.0 }, 0.3, 4).unwrap(), 0.3);
        assert!((lr_schedule(Schedule::Exponential { epsilon: 0.99 }, 1.0, 2).unwrap() - 0.9801).abs() < 1e-15);
        for t in [0, 1, 10, 1000] {
            assert_eq!(lr_schedule(Schedule::Constant, 0.7, t).unwrap(), 0.7);
        }
        assert!(lr_schedule(Schedule::Exponential { epsilon: 1.5 }, 1.0, 1).is_err());
        assert!(lr_schedule(Schedule::Exponential { epsilon: 0.0 }, 1.0, 1).is_err());
    }

    #[test]
    fn participant_count() {
        let cfg = FederationConfig { clients: 100, participation: 0.1, ..Default::default() };
        assert_eq!(cfg.participants_per_round(), 10);
        let cfg = FederationConfig { clients: 7, participation: 0.5, ..Default::default() };
        assert_eq!(cfg.participants_per_round(), 4);
    }

    #[test]
    fn config_validation() {
        let bad = [
            FederationConfig { local_steps: 0, ..Default::default() },
            FederationConfig { participation: 0.0, ..Default::default() },
            FederationConfig { server_opt: ServerOpt::Momentum { beta: 1.0, nu: 1.0 }, ..Default::default() },
            FederationConfig { server_opt: ServerOpt::Momentum { beta: 0.5, nu: 0.0 }, ..Default::default() },
            FederationConfig { local_lr: -0.1, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }
}
