#![allow(dead_code)]

use fedstab_core::data::{gen_synthetic, ClientShard, GlobalDataset, SyntheticGenerator, SyntheticSpec, Task};
use fedstab_core::engine::FederationConfig;
use fedstab_core::model::ModelSpec;

pub struct Fixture {
    pub spec: ModelSpec,
    pub data: GlobalDataset,
    pub shards: Vec<ClientShard>,
    pub generator: SyntheticGenerator,
}

pub fn synthetic(task: Task, clients: usize, per_client_n: usize, input_dim: usize, hetero: f64, noise: f64, seed: u64) -> Fixture {
    let s = SyntheticSpec { task, input_dim, clients, per_client_n, hetero, noise, label_skew: None };
    let (data, shards, generator) = gen_synthetic(&s, seed).unwrap();
    let spec = match task {
        Task::Regression => ModelSpec::linear(input_dim, 0.0),
        Task::Binary => ModelSpec::logistic(input_dim, 1e-3),
        Task::Multiclass { classes } => ModelSpec::mlp(input_dim, 8, classes, 1e-3),
    };
    Fixture { spec, data, shards, generator }
}

/// The default synthetic task: binary logistic regression over 10 clients.
pub fn default_task(seed: u64) -> Fixture {
    synthetic(Task::Binary, 10, 50, 10, 0.5, 0.1, seed)
}

pub fn default_config() -> FederationConfig {
    FederationConfig { clients: 10, local_steps: 5, batch_size: 8, local_lr: 0.05, rounds: 50, ..Default::default() }
}

/// Weighted least squares `sum_i w_i (a_i . x - y_i)^2` solved by Gaussian
/// elimination with partial pivoting; independent of the crate's solver.
pub fn least_squares(rows: &[(Vec<f64>, f64, f64)], ridge: f64) -> Vec<f64> {
    let d = rows[0].0.len();
    let mut a = vec![vec![0.0; d + 1]; d];
    for (x, y, w) in rows {
        for r in 0..d {
            for c in 0..d {
                a[r][c] += w * x[r] * x[c];
            }
            a[r][d] += w * x[r] * y;
        }
    }
    for (r, row) in a.iter_mut().enumerate() {
        row[r] += ridge;
    }
    for col in 0..d {
        let piv = (col..d).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..d {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=d {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..d).map(|r| a[r][d] / a[r][r]).collect()
}

/// Rows of a regression fixture weighted so that every client counts equally.
pub fn weighted_rows(f: &Fixture) -> Vec<(Vec<f64>, f64, f64)> {
    let n_clients = f.shards.len() as f64;
    let mut rows = Vec::new();
    for s in &f.shards {
        for &j in &s.indices {
            let z = &f.data.examples[j];
            let y = match z.label {
                fedstab_core::model::Label::Target(y) => y,
                _ => panic!("regression fixture expected"),
            };
            rows.push((z.features.clone(), y, 1.0 / (n_clients * s.len() as f64)));
        }
    }
    rows
}
