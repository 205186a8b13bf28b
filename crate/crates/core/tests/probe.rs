mod common;

use common::{default_config, default_task, least_squares, synthetic, weighted_rows};
use fedstab_core::data::{make_neighbor, ClientSampler, ClientShard, GlobalDataset, NeighborPair, Replacement, Task};
use fedstab_core::engine::{run_federated, Federation, FederationConfig, RoundMetrics};
use fedstab_core::model::{Example, Label, ModelSpec};
use fedstab_core::probe::{
    estimate_empirical_minimum, estimate_sigmas, estimate_smoothness, excess_risk_curve, gradient_norm_sq,
    minibatch_grad_variance, on_average_stability, reference_minimum, twin_distances, twin_run, MinimumStrategy,
    TwinEval, LOG_FLOOR,
};
use fedstab_core::rng::Stream;
use fedstab_core::{objective, ParamVector};
use rand::seq::index;
use rand::SeedableRng;

#[test]
fn degenerate_pair_gives_bitwise_equal_trajectories() {
    let f = default_task(1);
    let cfg = FederationConfig { participation: 0.5, ..default_config() };
    let pair = make_neighbor(&f.data, &f.shards, &f.generator, 42, Stream::root(0), Replacement::Original).unwrap();
    let run = twin_run(&cfg, &pair, &f.shards, &f.spec, TwinEval { metrics: true, ..Default::default() }).unwrap();
    assert_eq!(run.sq_dist.len(), cfg.rounds + 1);
    assert!(run.sq_dist.iter().all(|&d| d == 0.0));
    assert_eq!(run.base, run.perturbed);
}

#[test]
fn distance_is_zero_before_owner_first_participates() {
    let f = default_task(2);
    let cfg = FederationConfig { participation: 0.1, rounds: 60, ..default_config() };
    for j in [3usize, 120, 499] {
        let pair = make_neighbor(&f.data, &f.shards, &f.generator, j, Stream::root(5), Replacement::Fresh).unwrap();
        let fed = Federation::new(&cfg, &f.spec, &f.data, &f.shards).unwrap();
        let first = (0..cfg.rounds).find(|&t| fed.participants(t).contains(&pair.owner)).expect("owner never sampled");
        let run = twin_run(&cfg, &pair, &f.shards, &f.spec, TwinEval::default()).unwrap();
        // sq_dist[t] is measured at x^t, which reflects rounds 0..t-1
        assert!(run.sq_dist[..=first].iter().all(|&d| d == 0.0), "j={j} first={first}");
        assert!(run.sq_dist[cfg.rounds] > 0.0);
    }
}

#[test]
fn scalar_least_squares_matches_closed_form() {
    let ys = [0.3, -1.2, 2.5, 0.9, -0.4, 1.7];
    let n = ys.len() as f64;
    let mk = |ys: &[f64]| {
        let ex = ys.iter().map(|&y| Example::new(vec![1.0], Label::Target(y))).collect();
        GlobalDataset::new(ex, 0, "scalar").unwrap()
    };
    let j = 2;
    let mut ys2 = ys;
    ys2[j] = -3.1;
    let pair = NeighborPair { base: mk(&ys), perturbed: mk(&ys2), j, owner: 0 };
    let shards = vec![ClientShard { client_id: 0, indices: (0..ys.len()).collect() }];
    let (eta_l, eta_g) = (0.3, 0.5);
    let cfg = FederationConfig {
        clients: 1,
        local_steps: 1,
        batch_size: ys.len(),
        local_lr: eta_l,
        global_lr: eta_g,
        rounds: 40,
        ..Default::default()
    };
    let run = twin_run(&cfg, &pair, &shards, &ModelSpec::linear(1, 0.0), TwinEval::default()).unwrap();
    let eta = eta_l * eta_g;
    let dy = (ys[j] - ys2[j]) / n;
    let mut e: f64 = 0.0;
    for (t, &d) in run.sq_dist.iter().enumerate() {
        assert!((d - e * e).abs() <= 1e-10, "t={t}: {d} vs {}", e * e);
        e = (1.0 - eta) * e + eta * dy;
    }
}

#[test]
fn single_replicate_equals_twin_run() {
    let f = default_task(3);
    let cfg = FederationConfig { rounds: 20, ..default_config() };
    let curve = on_average_stability(&cfg, &f.data, &f.shards, &f.spec, &f.generator, 1, 9, Replacement::Fresh).unwrap();
    assert_eq!(curve.replicates, 1);
    let j = curve.indices[0];
    let pair = make_neighbor(&f.data, &f.shards, &f.generator, j, Stream::root(9).child(fedstab_core::rng::label::NEIGHBOR), Replacement::Fresh).unwrap();
    let run = twin_run(&cfg, &pair, &f.shards, &f.spec, TwinEval::default()).unwrap();
    assert_eq!(curve.mean_sq_dist, run.sq_dist);
    assert!(curve.stderr.iter().all(|&s| s == 0.0));
    let direct = twin_distances(&cfg, &f.data, &f.shards, &f.spec, &f.generator, &[j], 9, Replacement::Fresh).unwrap();
    assert_eq!(direct[0], run.sq_dist);
}

#[test]
fn noiseless_homogeneous_original_replacement_gives_zero_curve() {
    let f = synthetic(Task::Regression, 5, 20, 4, 0.0, 0.0, 4);
    let cfg = FederationConfig { clients: 5, batch_size: 4, rounds: 30, ..Default::default() };
    let curve = on_average_stability(&cfg, &f.data, &f.shards, &f.spec, &f.generator, 10, 1, Replacement::Original).unwrap();
    assert!(curve.mean_sq_dist.iter().all(|&d| d == 0.0));
    assert_eq!(curve.mean_sq_dist[0], 0.0);
}

fn log_trend_slope(curve: &[f64]) -> Option<f64> {
    let start = curve.iter().position(|&d| d > 0.0)?;
    let pts: Vec<(f64, f64)> = curve[start..].iter().enumerate().map(|(k, &d)| ((start + k) as f64, (d + LOG_FLOOR).ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

#[test]
fn stability_curve_grows_in_trend() {
    let mut up = 0;
    for seed in 0..5 {
        let f = default_task(seed);
        let cfg = FederationConfig { seed, rounds: 60, ..default_config() };
        let curve = on_average_stability(&cfg, &f.data, &f.shards, &f.spec, &f.generator, 8, seed, Replacement::Fresh).unwrap();
        assert_eq!(curve.mean_sq_dist[0], 0.0);
        assert!(curve.mean_sq_dist.iter().all(|&d| d >= 0.0));
        if log_trend_slope(&curve.mean_sq_dist).is_some_and(|s| s >= 0.0) {
            up += 1;
        }
    }
    assert!(up >= 4, "{up} of 5 seeds");
}

#[test]
fn gradient_norm_identities() {
    let f = synthetic(Task::Regression, 4, 25, 3, 1.0, 0.3, 6);
    let w = ParamVector::from_vec(least_squares(&weighted_rows(&f), 0.0));
    assert!(gradient_norm_sq(&f.spec, &f.data, &f.shards, &w).unwrap() <= 1e-10);

    let x = ParamVector::from_vec(vec![0.4, -1.0, 2.0]);
    let whole = f.spec.grad(&x, &f.data.examples).unwrap().norm_sq();
    let g = gradient_norm_sq(&f.spec, &f.data, &f.shards, &x).unwrap();
    assert!((g - whole).abs() <= 1e-12 * whole.max(1.0));

    let copies: Vec<Example> = (0..3).flat_map(|_| f.data.examples[..25].iter().cloned()).collect();
    let data = GlobalDataset::new(copies, 0, "copies").unwrap();
    let shards: Vec<ClientShard> = (0..3).map(|i| ClientShard { client_id: i, indices: (25 * i..25 * (i + 1)).collect() }).collect();
    let global = objective::global_grad(&f.spec, &data, &shards, &x).unwrap();
    let first = objective::client_grad(&f.spec, &data, &shards[0], &x).unwrap();
    assert!(global.dist_sq(&first).sqrt() <= 1e-12);
}

fn metric(t: usize, test: f64) -> RoundMetrics {
    RoundMetrics { t, train_loss: 0.0, test_loss: Some(test), grad_norm_sq: 0.0, gen_gap: None, excess_risk: None, stability_sq: None, eta_g_t: 1.0 }
}

#[test]
fn excess_risk_minimum_location() {
    let flat: Vec<RoundMetrics> = (0..5).map(|t| metric(t * 10, 1.0)).collect();
    let c = excess_risk_curve(&flat, 0.25).unwrap();
    assert_eq!(c.t_star, 0);
    assert_eq!(c.e_min, 0.75);
    let valley: Vec<RoundMetrics> = [3.0, 2.0, 1.5, 1.5, 2.5].iter().enumerate().map(|(k, &v)| metric(k * 5, v)).collect();
    let c = excess_risk_curve(&valley, 1.0).unwrap();
    assert_eq!((c.t_star, c.e_min), (10, 0.5));
    assert!(excess_risk_curve(&valley, f64::NAN).is_err());
}

#[test]
fn decomposition_identity_holds_on_recorded_metrics() {
    let f = default_task(7);
    let test = f.generator.test_set(200, Stream::root(1), 2).unwrap();
    let fmin = reference_minimum(&f.spec, &f.data, &f.shards, 200).unwrap().value;
    let out = run_federated(&default_config(), &f.spec, &f.data, &f.shards, Some(&test), Some(fmin)).unwrap();
    for m in &out.metrics {
        let (test_loss, gap, ex) = (m.test_loss.unwrap(), m.gen_gap.unwrap(), m.excess_risk.unwrap());
        assert_eq!(gap, test_loss - m.train_loss);
        assert!((ex - (gap + (m.train_loss - fmin))).abs() <= 1e-12);
    }
}

#[test]
fn empirical_minimum_for_least_squares() {
    let f = synthetic(Task::Regression, 4, 30, 5, 0.8, 0.5, 8);
    let w = least_squares(&weighted_rows(&f), 0.0);
    let oracle = objective::global_loss(&f.spec, &f.data, &f.shards, &ParamVector::from_vec(w)).unwrap();
    let est = estimate_empirical_minimum(&f.spec, &f.data, &f.shards, 10).unwrap();
    assert_eq!(est.strategy, MinimumStrategy::Analytic);
    assert!((est.value - oracle).abs() <= 1e-8);
    let reference = reference_minimum(&f.spec, &f.data, &f.shards, 20_000).unwrap();
    assert_eq!(reference.strategy, MinimumStrategy::ReferenceRun);
    assert!((reference.value - oracle).abs() <= 1e-8, "{} vs {oracle}", reference.value);
}

#[test]
fn separable_logistic_is_budget_limited_and_monotone() {
    let ex: Vec<Example> = (0..20)
        .map(|k| {
            let x = (k as f64 - 9.5) / 5.0;
            Example::new(vec![x, 1.0], Label::Class((x > 0.0) as usize))
        })
        .collect();
    let data = GlobalDataset::new(ex, 2, "separable").unwrap();
    let shards = vec![ClientShard { client_id: 0, indices: (0..20).collect() }];
    let spec = ModelSpec::logistic(2, 0.0);
    let mut prev = f64::INFINITY;
    for budget in [50, 100, 200, 400, 800] {
        let est = estimate_empirical_minimum(&spec, &data, &shards, budget).unwrap();
        assert!(est.budget_limited);
        assert!(est.value > 0.0 && est.value <= prev);
        prev = est.value;
    }
}

#[test]
fn full_batch_has_no_sampling_variance() {
    let f = default_task(9);
    let x = ParamVector::from_vec(vec![0.1; f.spec.dim()]);
    let s = estimate_sigmas(&f.spec, &f.data, &f.shards, &[x], 50).unwrap();
    assert_eq!(s.sigma_l_sq, 0.0);
    assert!(s.sigma_g_sq > 0.0);
    assert!(estimate_sigmas(&f.spec, &f.data, &f.shards, &[ParamVector::zeros(f.spec.dim())], 51).unwrap_err().is_config());
}

#[test]
fn homogeneous_clients_have_small_global_variance() {
    let f = synthetic(Task::Regression, 5, 20, 4, 0.0, 0.0, 10);
    let w = ParamVector::from_vec(f.generator.true_params(0).to_vec());
    let s = estimate_sigmas(&f.spec, &f.data, &f.shards, &[w], 4).unwrap();
    assert!(s.sigma_g_sq <= 1e-6);

    let f = synthetic(Task::Regression, 5, 2000, 5, 0.0, 0.1, 11);
    let w = ParamVector::from_vec(f.generator.true_params(0).to_vec());
    let s = estimate_sigmas(&f.spec, &f.data, &f.shards, &[w], 8).unwrap();
    assert!(s.sigma_g_sq <= 1e-3, "{}", s.sigma_g_sq);
}

#[test]
fn minibatch_variance_matches_monte_carlo_and_shrinks_with_b() {
    let f = default_task(12);
    let shard = &f.shards[0];
    let x = ParamVector::from_vec((0..f.spec.dim()).map(|k| 0.2 * k as f64 - 0.5).collect());
    let full = objective::client_grad(&f.spec, &f.data, shard, &x).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let mut prev = f64::INFINITY;
    for b in [2usize, 4, 8, 16] {
        let exact = minibatch_grad_variance(&f.spec, &f.data, shard, &x, b).unwrap();
        let draws = 20_000;
        let samples: Vec<f64> = (0..draws)
            .map(|_| {
                let pos = index::sample(&mut rng, shard.len(), b);
                let batch = pos.iter().map(|p| &f.data.examples[shard.indices[p]]);
                f.spec.grad(&x, batch).unwrap().dist_sq(&full)
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let sd = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt();
        let stderr = sd / (draws as f64).sqrt();
        assert!((mean - exact).abs() <= 4.0 * stderr, "b={b}: {mean} vs {exact} (se {stderr})");
        assert!(exact <= prev);
        prev = exact;
    }
}

/// Largest eigenvalue of the client-weighted second-moment matrix by power iteration.
fn top_eigenvalue(f: &common::Fixture, ridge: f64) -> f64 {
    let rows = weighted_rows(f);
    let d = rows[0].0.len();
    let mut m = vec![vec![0.0; d]; d];
    for (x, _, w) in &rows {
        for r in 0..d {
            for c in 0..d {
                m[r][c] += w * x[r] * x[c];
            }
        }
    }
    let mut v = vec![1.0; d];
    let mut lambda = 0.0;
    for _ in 0..2000 {
        let mv: Vec<f64> = (0..d).map(|r| (0..d).map(|c| m[r][c] * v[c]).sum()).collect();
        lambda = mv.iter().map(|a| a * a).sum::<f64>().sqrt();
        v = mv.iter().map(|a| a / lambda).collect();
    }
    lambda + ridge
}

#[test]
fn smoothness_estimates() {
    let mut f = synthetic(Task::Regression, 4, 50, 5, 0.5, 0.2, 13);
    f.spec = ModelSpec::linear(5, 0.01);
    let oracle = top_eigenvalue(&f, 0.01);
    let l = estimate_smoothness(&f.spec, &f.data, &f.shards, 1000, 0.1, 0).unwrap();
    assert!(l <= oracle * (1.0 + 1e-9) && l >= 0.95 * oracle, "{l} vs {oracle}");

    let mut prev = 0.0;
    for pairs in [1, 2, 5, 20, 100] {
        let l = estimate_smoothness(&f.spec, &f.data, &f.shards, pairs, 0.1, 4).unwrap();
        assert!(l >= prev);
        prev = l;
    }

    let lambda: f64 = 2.25;
    let data = GlobalDataset::new(vec![Example::new(vec![lambda.sqrt()], Label::Target(0.7))], 0, "quad").unwrap();
    let shards = vec![ClientShard { client_id: 0, indices: vec![0] }];
    let l = estimate_smoothness(&ModelSpec::linear(1, 0.0), &data, &shards, 10, 0.5, 1).unwrap();
    assert!((l - lambda).abs() <= 1e-12);
}
