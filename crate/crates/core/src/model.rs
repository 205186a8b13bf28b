//! Prediction models with analytic gradients.
//!
//! Three families: least-squares linear regression, binary logistic
//! regression and a one-hidden-layer tanh MLP with softmax cross-entropy.
//! The objective of every family is the batch mean of the per-example loss
//! plus `0.5 * weight_decay * ||x||^2`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Target(f64),
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Target(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: Label,
}

impl Example {
    pub fn new(features: Vec<f64>, label: Label) -> Self {
        Example { features, label }
    }

    /// Bitwise comparison (features compared by bit pattern).
    pub fn bits_eq(&self, other: &Example) -> bool {
        let labels = match (self.label, other.label) {
            (Label::Class(a), Label::Class(b)) => a == b,
            (Label::Target(a), Label::Target(b)) => a.to_bits() == b.to_bits(),
            _ => false,
        };
        labels
            && self.features.len() == other.features.len()
            && self.features.iter().zip(&other.features).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelFamily {
    LinearRegression,
    LogisticRegression,
    Mlp { hidden_dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub input_dim: usize,
    pub num_classes: usize,
    pub weight_decay: f64,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, weight_decay: f64) -> Self {
        ModelSpec { family: ModelFamily::LinearRegression, input_dim, num_classes: 0, weight_decay }
    }

    pub fn logistic(input_dim: usize, weight_decay: f64) -> Self {
        ModelSpec { family: ModelFamily::LogisticRegression, input_dim, num_classes: 2, weight_decay }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize, weight_decay: f64) -> Self {
        ModelSpec { family: ModelFamily::Mlp { hidden_dim }, input_dim, num_classes, weight_decay }
    }

    /// Parameter dimension `d`.
    pub fn dim(&self) -> usize {
        match self.family {
            ModelFamily::LinearRegression | ModelFamily::LogisticRegression => self.input_dim,
            ModelFamily::Mlp { hidden_dim } => {
                hidden_dim * self.input_dim + hidden_dim + self.num_classes * hidden_dim + self.num_classes
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be a finite nonnegative number, got {}", self.weight_decay)));
        }
        match self.family {
            ModelFamily::LinearRegression => Ok(()),
            ModelFamily::LogisticRegression if self.num_classes != 2 => Err(Error::Config(format!(
                "logistic regression is binary, num_classes must be 2 (got {})",
                self.num_classes
            ))),
            ModelFamily::LogisticRegression => Ok(()),
            ModelFamily::Mlp { hidden_dim } => {
                if hidden_dim == 0 {
                    Err(Error::Config("hidden_dim must be >= 1".into()))
                } else if self.num_classes < 2 {
                    Err(Error::Config(format!("mlp needs num_classes >= 2 (got {})", self.num_classes)))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Zeros for the linear families, Xavier-uniform weights (zero biases) for the MLP.
    pub fn init_params(&self, stream: Stream) -> ParamVector {
        let mut x = ParamVector::zeros(self.dim());
        if let ModelFamily::Mlp { hidden_dim } = self.family {
            let mut rng = stream.rng();
            let (w1, _, w2, _) = mlp_offsets(self.input_dim, hidden_dim, self.num_classes);
            let lim1 = (6.0 / (self.input_dim + hidden_dim) as f64).sqrt();
            let lim2 = (6.0 / (hidden_dim + self.num_classes) as f64).sqrt();
            let v = x.as_mut_slice();
            for w in &mut v[w1..w1 + hidden_dim * self.input_dim] {
                *w = rng.random_range(-lim1..lim1);
            }
            for w in &mut v[w2..w2 + self.num_classes * hidden_dim] {
                *w = rng.random_range(-lim2..lim2);
            }
        }
        x
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.dim() {
            return Err(Error::Config(format!(
                "parameter dimension {} does not match model dimension {}",
                params.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn check_example(&self, z: &Example) -> Result<()> {
        if z.features.len() != self.input_dim {
            return Err(Error::Config(format!(
                "example has {} features, model expects {}",
                z.features.len(),
                self.input_dim
            )));
        }
        match (self.family, z.label) {
            (ModelFamily::LinearRegression, Label::Target(_)) => Ok(()),
            (ModelFamily::LogisticRegression, Label::Class(c)) if c < 2 => Ok(()),
            (ModelFamily::Mlp { .. }, Label::Class(c)) if c < self.num_classes => Ok(()),
            (_, label) => Err(Error::Config(format!("label {label:?} is not valid for {:?}", self.family))),
        }
    }

    fn decay_term(&self, params: &ParamVector) -> f64 {
        if self.weight_decay == 0.0 {
            0.0
        } else {
            0.5 * self.weight_decay * params.norm_sq()
        }
    }

    /// Mean per-example loss over `batch` plus the weight-decay term.
    pub fn loss<'a, I>(&self, params: &ParamVector, batch: I) -> Result<f64>
    where
        I: IntoIterator<Item = &'a Example>,
    {
        self.check_params(params)?;
        let mut scratch = Scratch::new(self);
        let mut sum = 0.0;
        let mut count = 0usize;
        for z in batch {
            self.check_example(z)?;
            sum += self.example_loss(params, z, &mut scratch);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Precondition("loss over an empty batch".into()));
        }
        let value = sum / count as f64 + self.decay_term(params);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss over batch of {count}")));
        }
        Ok(value)
    }

    /// Exact gradient of [`ModelSpec::loss`].
    pub fn grad<'a, I>(&self, params: &ParamVector, batch: I) -> Result<ParamVector>
    where
        I: IntoIterator<Item = &'a Example>,
    {
        self.check_params(params)?;
        let mut scratch = Scratch::new(self);
        let mut g = ParamVector::zeros(self.dim());
        let mut count = 0usize;
        for z in batch {
            self.check_example(z)?;
            self.accumulate_grad(params, z, g.as_mut_slice(), &mut scratch);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Precondition("gradient over an empty batch".into()));
        }
        let inv = 1.0 / count as f64;
        g.scale(inv);
        if self.weight_decay != 0.0 {
            g.axpy(self.weight_decay, params);
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient over batch of {count}")));
        }
        Ok(g)
    }

    /// Central-difference approximation of the gradient, one coordinate pair at a time.
    pub fn finite_diff_grad<'a, I>(&self, params: &ParamVector, batch: I, step: f64) -> Result<ParamVector>
    where
        I: IntoIterator<Item = &'a Example>,
    {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Precondition(format!("finite-difference step must be > 0, got {step}")));
        }
        let batch: Vec<&Example> = batch.into_iter().collect();
        let mut probe = params.clone();
        let mut g = ParamVector::zeros(params.len());
        for i in 0..params.len() {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = self.loss(&probe, batch.iter().copied())?;
            probe[i] = orig - step;
            let down = self.loss(&probe, batch.iter().copied())?;
            probe[i] = orig;
            g[i] = (up - down) / (2.0 * step);
        }
        Ok(g)
    }

    fn example_loss(&self, params: &ParamVector, z: &Example, scratch: &mut Scratch) -> f64 {
        let w = params.as_slice();
        match (self.family, z.label) {
            (ModelFamily::LinearRegression, Label::Target(y)) => {
                let r = dot(w, &z.features) - y;
                0.5 * r * r
            }
            (ModelFamily::LogisticRegression, Label::Class(y)) => {
                let s = dot(w, &z.features);
                // -log sigmoid(s) for y = 1, -log(1 - sigmoid(s)) for y = 0
                if y == 1 {
                    softplus(-s)
                } else {
                    softplus(s)
                }
            }
            (ModelFamily::Mlp { hidden_dim }, Label::Class(y)) => {
                self.mlp_forward(w, hidden_dim, &z.features, scratch);
                let lse = log_sum_exp(&scratch.logits);
                lse - scratch.logits[y]
            }
            _ => unreachable!("labels are checked before evaluation"),
        }
    }

    fn accumulate_grad(&self, params: &ParamVector, z: &Example, g: &mut [f64], scratch: &mut Scratch) {
        let w = params.as_slice();
        match (self.family, z.label) {
            (ModelFamily::LinearRegression, Label::Target(y)) => {
                let r = dot(w, &z.features) - y;
                for (gi, xi) in g.iter_mut().zip(&z.features) {
                    *gi += r * xi;
                }
            }
            (ModelFamily::LogisticRegression, Label::Class(y)) => {
                let s = dot(w, &z.features);
                let coef = sigmoid(s) - y as f64;
                for (gi, xi) in g.iter_mut().zip(&z.features) {
                    *gi += coef * xi;
                }
            }
            (ModelFamily::Mlp { hidden_dim }, Label::Class(y)) => {
                let (input, classes) = (self.input_dim, self.num_classes);
                let (o_w1, o_b1, o_w2, o_b2) = mlp_offsets(input, hidden_dim, classes);
                self.mlp_forward(w, hidden_dim, &z.features, scratch);
                // d loss / d logits = softmax - onehot
                let lse = log_sum_exp(&scratch.logits);
                for (c, l) in scratch.logits.iter_mut().enumerate() {
                    *l = (*l - lse).exp() - if c == y { 1.0 } else { 0.0 };
                }
                let delta_out = &scratch.logits;
                for j in 0..hidden_dim {
                    scratch.delta_hidden[j] = 0.0;
                }
                for c in 0..classes {
                    let d = delta_out[c];
                    let row = o_w2 + c * hidden_dim;
                    for j in 0..hidden_dim {
                        g[row + j] += d * scratch.hidden[j];
                        scratch.delta_hidden[j] += w[row + j] * d;
                    }
                    g[o_b2 + c] += d;
                }
                for j in 0..hidden_dim {
                    let h = scratch.hidden[j];
                    let dh = scratch.delta_hidden[j] * (1.0 - h * h);
                    let row = o_w1 + j * input;
                    for (k, xk) in z.features.iter().enumerate() {
                        g[row + k] += dh * xk;
                    }
                    g[o_b1 + j] += dh;
                }
            }
            _ => unreachable!("labels are checked before evaluation"),
        }
    }

    fn mlp_forward(&self, w: &[f64], hidden_dim: usize, x: &[f64], scratch: &mut Scratch) {
        let (input, classes) = (self.input_dim, self.num_classes);
        let (o_w1, o_b1, o_w2, o_b2) = mlp_offsets(input, hidden_dim, classes);
        for j in 0..hidden_dim {
            let row = &w[o_w1 + j * input..o_w1 + (j + 1) * input];
            scratch.hidden[j] = (dot(row, x) + w[o_b1 + j]).tanh();
        }
        for c in 0..classes {
            let row = &w[o_w2 + c * hidden_dim..o_w2 + (c + 1) * hidden_dim];
            scratch.logits[c] = dot(row, &scratch.hidden) + w[o_b2 + c];
        }
    }
}

struct Scratch {
    hidden: Vec<f64>,
    delta_hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl Scratch {
    fn new(spec: &ModelSpec) -> Self {
        let h = match spec.family {
            ModelFamily::Mlp { hidden_dim } => hidden_dim,
            _ => 0,
        };
        let c = if h > 0 { spec.num_classes } else { 0 };
        Scratch { hidden: vec![0.0; h], delta_hidden: vec![0.0; h], logits: vec![0.0; c] }
    }
}

/// (W1, b1, W2, b2) offsets; weights are row-major, one row per output unit.
fn mlp_offsets(input: usize, hidden: usize, classes: usize) -> (usize, usize, usize, usize) {
    let w1 = 0;
    let b1 = hidden * input;
    let w2 = b1 + hidden;
    let b2 = w2 + classes * hidden;
    (w1, b1, w2, b2)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().fold(0.0, |acc, x| acc + (x - m).exp()).ln()
}
