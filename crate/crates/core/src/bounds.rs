//! Closed-form stability, convergence and excess-risk bounds and the exact
//! recursions they relax.
//!
//! Rate envelopes are order-level: every `O(.)` is evaluated with leading
//! constant 1 and each term is reported separately. The recursions are exact.
//! Quantities that overflow for long horizons (`(1+beta)^T`, `psi_beta`) are
//! carried as natural logarithms; `ln_*` fields are finite whenever the
//! inputs are valid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Smoothness constant `L`.
    pub l: f64,
    pub sigma_l_sq: f64,
    pub sigma_g_sq: f64,
    /// Total number of training samples.
    pub n: f64,
    pub k: usize,
    pub t: usize,
    /// Learning-rate cap constant in `eta_g^t <= sqrt(c / t)`.
    pub c: f64,
    pub eta_l: f64,
    /// Initialization gap `F >= f(x^0) - f(x_hat)`.
    pub f_init: f64,
    pub beta: f64,
    pub nu: f64,
    pub gamma: f64,
    /// Optimization-error constant; defaults to `1 / (2 mu)` when `mu` is given.
    pub c_opt: Option<f64>,
    pub mu: Option<f64>,
    pub b: usize,
}

impl Default for BoundInputs {
    fn default() -> Self {
        BoundInputs {
            l: 1.0,
            sigma_l_sq: 1.0,
            sigma_g_sq: 1.0,
            n: 1000.0,
            k: 5,
            t: 1000,
            c: 0.5,
            eta_l: 0.025,
            f_init: 1.0,
            beta: 0.0,
            nu: 1.0,
            gamma: 1.0,
            c_opt: None,
            mu: None,
            b: 8,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be a finite positive number, got {v}")))
    }
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be a finite nonnegative number, got {v}")))
    }
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        positive("L", self.l)?;
        nonnegative("sigma_l_sq", self.sigma_l_sq)?;
        nonnegative("sigma_g_sq", self.sigma_g_sq)?;
        positive("n", self.n)?;
        if self.k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if self.t == 0 {
            return Err(Error::Config("T must be >= 1".into()));
        }
        if self.b == 0 {
            return Err(Error::Config("b must be >= 1".into()));
        }
        positive("c", self.c)?;
        positive("eta_l", self.eta_l)?;
        positive("F_init", self.f_init)?;
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        positive("nu", self.nu)?;
        positive("gamma", self.gamma)?;
        if let Some(c) = self.c_opt {
            nonnegative("C", c)?;
        }
        if let Some(mu) = self.mu {
            positive("mu", mu)?;
        }
        Ok(())
    }

    pub fn psi(&self) -> f64 {
        psi(self.eta_l, self.l, self.k)
    }

    /// `16 K (sigma_l^2 + 3 b sigma_g^2 / n)`
    pub fn psi_sigma(&self) -> f64 {
        16.0 * self.k as f64 * self.sigma_n_sq_proof()
    }

    /// `sigma_l^2 + sigma_g^2 / n`, the form used in the theorem statements.
    pub fn sigma_n_sq(&self) -> f64 {
        self.sigma_l_sq + self.sigma_g_sq / self.n
    }

    /// `sigma_l^2 + 3 b sigma_g^2 / n`, the form that appears inside `psi_sigma`.
    pub fn sigma_n_sq_proof(&self) -> f64 {
        self.sigma_l_sq + 3.0 * self.b as f64 * self.sigma_g_sq / self.n
    }

    /// `sigma_l^2 + K sigma_g^2`
    pub fn sigma_k_sq(&self) -> f64 {
        self.sigma_l_sq + self.k as f64 * self.sigma_g_sq
    }

    pub fn c_psi(&self) -> f64 {
        self.c * self.psi()
    }

    /// The constant `C` of the optimization-error term.
    pub fn optimization_constant(&self) -> Result<f64> {
        match (self.c_opt, self.mu) {
            (Some(c), _) => Ok(c),
            (None, Some(mu)) => Ok(1.0 / (2.0 * mu)),
            (None, None) => Err(Error::Config("C is required when mu is not given".into())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warning {
    /// `psi` outside `(1, 2)`: `eta_l` is outside the `Theta(1/(K L))` regime.
    PsiOutOfRange,
    /// `c psi >= 1` (or `nu^2 c psi >= 1`): the stability term no longer decays in `T`.
    OverfittingRegime,
    /// Some `eta_g^t > 1`, so `(1 - eta_g)^2 <= 1` no longer holds.
    GlobalLrAboveOne,
}

impl Warning {
    pub fn message(self) -> &'static str {
        match self {
            Warning::PsiOutOfRange => "psi lies outside (1, 2); eta_l is outside the Theta(1/(K L)) regime",
            Warning::OverfittingRegime => "c*psi >= 1: the stability term grows with T (over-fitting regime)",
            Warning::GlobalLrAboveOne => "eta_g^t > 1 for some round; the contraction assumption is broken",
        }
    }
}

/// `(1 + 4 eta_l L)^K`
pub fn psi(eta_l: f64, l: f64, k: usize) -> f64 {
    (1.0 + 4.0 * eta_l * l).powi(k as i32)
}

pub fn psi_in_regime(psi: f64) -> bool {
    psi > 1.0 && psi < 2.0
}

/// `eta_g^t = sqrt(c / max(t, 1))` for `t = 0..T`.
pub fn inverse_sqrt_schedule(c: f64, rounds: usize) -> Vec<f64> {
    (0..rounds).map(|t| (c / t.max(1) as f64).sqrt()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recursion {
    /// `s[0..=T]`; may overflow to infinity where `ln_values` stays finite.
    pub values: Vec<f64>,
    pub ln_values: Vec<f64>,
    pub warnings: Vec<Warning>,
}

impl Recursion {
    fn from_linear(values: Vec<f64>, warnings: Vec<Warning>) -> Self {
        let ln_values = values.iter().map(|v| v.ln()).collect();
        Recursion { values, ln_values, warnings }
    }
}

fn schedule_warnings(inputs: &BoundInputs, etas: &[f64]) -> Vec<Warning> {
    let mut w = Vec::new();
    if !psi_in_regime(inputs.psi()) {
        w.push(Warning::PsiOutOfRange);
    }
    if etas.iter().any(|&e| e > 1.0) {
        w.push(Warning::GlobalLrAboveOne);
    }
    w
}

/// Exact global stability recursion for server SGD with the slack
/// parameter `p = 0`:
/// `s[t+1] = ((1 - eta)^2 + eta^2 psi) s[t] + psi_sigma eta_l^2 eta^2`, `eta = eta_g^t`.
pub fn stability_recursion_sgd(inputs: &BoundInputs, etas: &[f64]) -> Recursion {
    let psi = inputs.psi();
    let drive = inputs.psi_sigma() * inputs.eta_l * inputs.eta_l;
    let mut s = Vec::with_capacity(etas.len() + 1);
    s.push(0.0);
    for &eta in etas {
        let prev = *s.last().unwrap();
        let factor = (1.0 - eta) * (1.0 - eta) + eta * eta * psi;
        s.push(factor * prev + drive * eta * eta);
    }
    Recursion::from_linear(s, schedule_warnings(inputs, etas))
}

/// The relaxed recursion obtained after bounding `(1 - eta)^2 <= 1`:
/// `s[t+1] = (1 + psi eta^2) s[t] + psi_sigma eta_l^2 eta^2`. This is the
/// form the closed-form `T^{c psi}` growth is unrolled from.
pub fn stability_recursion_sgd_relaxed(inputs: &BoundInputs, etas: &[f64]) -> Recursion {
    let psi = inputs.psi();
    let drive = inputs.psi_sigma() * inputs.eta_l * inputs.eta_l;
    let mut s = Vec::with_capacity(etas.len() + 1);
    s.push(0.0);
    for &eta in etas {
        let prev = *s.last().unwrap();
        s.push((1.0 + psi * eta * eta) * prev + drive * eta * eta);
    }
    Recursion::from_linear(s, schedule_warnings(inputs, etas))
}

/// `(psi_sigma / psi) T^{c psi}`
pub fn stability_closed_form_sgd(inputs: &BoundInputs) -> f64 {
    stability_closed_form_sgd_at(inputs, inputs.t)
}

pub fn stability_closed_form_sgd_at(inputs: &BoundInputs, t: usize) -> f64 {
    ln_stability_closed_form(inputs, t, 0.0, 1.0).exp()
}

/// `(psi_sigma / psi) psi_beta(T) T^{nu^2 c psi}`, reducing to the server-SGD
/// form at `beta = 0`, `nu = 1`.
pub fn stability_closed_form_fosm_at(inputs: &BoundInputs, t: usize) -> f64 {
    ln_stability_closed_form_fosm_at(inputs, t).exp()
}

pub fn ln_stability_closed_form_fosm_at(inputs: &BoundInputs, t: usize) -> f64 {
    ln_stability_closed_form(inputs, t, ln_psi_beta(inputs.beta, t), inputs.nu * inputs.nu)
}

fn ln_stability_closed_form(inputs: &BoundInputs, t: usize, ln_scale: f64, nu_sq: f64) -> f64 {
    let psi = inputs.psi();
    (inputs.psi_sigma() / psi).ln() + ln_scale + nu_sq * inputs.c * psi * (t as f64).ln()
}

/// `ln psi_beta(T)` with `psi_beta = ((2 beta (beta + 1))^T - 1) / (2 beta (beta + 1) - 1)`.
/// The removable singularity at `2 beta (beta + 1) = 1` takes its limit `T`.
pub fn ln_psi_beta(beta: f64, t: usize) -> f64 {
    let r = 2.0 * beta * (beta + 1.0);
    let tf = t as f64;
    if r == 0.0 {
        return if t == 0 { f64::NEG_INFINITY } else { 0.0 };
    }
    let lr = r.ln();
    if (r - 1.0).abs() < 1e-12 {
        return tf.ln();
    }
    if r < 1.0 {
        // (1 - r^T) / (1 - r)
        (-(tf * lr).exp_m1()).ln() - (1.0 - r).ln()
    } else {
        // r^T (1 - r^-T) / (r - 1)
        tf * lr + (-(-tf * lr).exp_m1()).ln() - (r - 1.0).ln()
    }
}

pub fn psi_beta(beta: f64, t: usize) -> f64 {
    ln_psi_beta(beta, t).exp()
}

/// Exact FOSM stability recursion
/// `s[t+1] = alpha^t s[t] + beta^2 s[t-1] + gamma^t` with
/// `alpha^t = (1 + beta)^2 + (eta_g^t)^2 nu^2 psi` and
/// `gamma^t = nu^2 psi_sigma (eta_l eta_g^t)^2`, from `s[0] = s[-1] = 0`.
///
/// Evaluated with a running power-of-two rescale so `ln_values` stays finite
/// where the linear values overflow.
pub fn stability_recursion_fosm(inputs: &BoundInputs, etas: &[f64]) -> Recursion {
    let psi = inputs.psi();
    let nu_sq = inputs.nu * inputs.nu;
    let beta = inputs.beta;
    let base = (1.0 + beta) * (1.0 + beta);
    let drive = nu_sq * inputs.psi_sigma() * inputs.eta_l * inputs.eta_l;
    // true value = scaled value * 2^exp
    let mut exp: i32 = 0;
    let (mut cur, mut prev) = (0.0f64, 0.0f64);
    let mut ln_values = Vec::with_capacity(etas.len() + 1);
    let mut values = Vec::with_capacity(etas.len() + 1);
    ln_values.push(f64::NEG_INFINITY);
    values.push(0.0);
    for &eta in etas {
        let alpha = base + eta * eta * nu_sq * psi;
        let gamma = drive * eta * eta;
        let next = alpha * cur + beta * beta * prev + gamma * (-exp as f64).exp2();
        prev = cur;
        cur = next;
        if cur > 1e200 {
            cur *= (-600.0f64).exp2();
            prev *= (-600.0f64).exp2();
            exp += 600;
        }
        let ln = cur.ln() + exp as f64 * std::f64::consts::LN_2;
        ln_values.push(ln);
        values.push(ln.exp());
    }
    let mut warnings = schedule_warnings(inputs, etas);
    if nu_sq * inputs.c * psi >= 1.0 {
        warnings.push(Warning::OverfittingRegime);
    }
    Recursion { values, ln_values, warnings }
}

/// `sqrt(sigma_K^2 F / (T K)) + sigma_K^2 / T`
pub fn convergence_bound_sgd(inputs: &BoundInputs) -> f64 {
    let (k, t) = (inputs.k as f64, inputs.t as f64);
    let s = inputs.sigma_k_sq();
    (s * inputs.f_init / (t * k)).sqrt() + s / t
}

/// Grid resolution of [`tune_stepsize`].
pub const STEPSIZE_GRID: usize = 10_000;
/// Ratio between the smallest and largest grid point.
pub const STEPSIZE_GRID_SPAN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunedStepsize {
    pub eta: f64,
    pub grid_min: f64,
    pub bound_rhs: f64,
}

/// `Psi(eta) = r0 / (eta T) + b eta + e eta^2`
pub fn stepsize_objective(r0: f64, b: f64, e: f64, t: f64, eta: f64) -> f64 {
    r0 / (eta * t) + b * eta + e * eta * eta
}

/// Grid-searches `Psi(eta)` over a log grid on `(0, 1/d]` (endpoint
/// included) and evaluates the tuned upper bound
/// `2 sqrt(b r0 / T) + 2 e^{1/3} (r0 / T)^{2/3} + d r0 / T`.
pub fn tune_stepsize(r0: f64, b: f64, e: f64, d: f64, t: f64) -> Result<TunedStepsize> {
    for (name, v) in [("r0", r0), ("b", b), ("e", e)] {
        nonnegative(name, v)?;
    }
    positive("d", d)?;
    if !(t >= 1.0 && t.is_finite()) {
        return Err(Error::Config(format!("T must be >= 1, got {t}")));
    }
    let cap = 1.0 / d;
    if r0 == 0.0 && b == 0.0 && e == 0.0 {
        return Ok(TunedStepsize { eta: cap, grid_min: 0.0, bound_rhs: 0.0 });
    }
    let q = r0 / t;
    let bound_rhs = 2.0 * (b * q).sqrt() + 2.0 * e.cbrt() * q.powf(2.0 / 3.0) + d * q;
    let ln_lo = (cap * STEPSIZE_GRID_SPAN).ln();
    let ln_hi = cap.ln();
    let mut best = (cap, stepsize_objective(r0, b, e, t, cap));
    for i in 0..STEPSIZE_GRID - 1 {
        let frac = i as f64 / (STEPSIZE_GRID - 1) as f64;
        let eta = (ln_lo + frac * (ln_hi - ln_lo)).exp();
        let v = stepsize_objective(r0, b, e, t, eta);
        if v < best.1 {
            best = (eta, v);
        }
    }
    Ok(TunedStepsize { eta: best.0, grid_min: best.1, bound_rhs })
}

/// The four order-level terms of a minimum-excess-risk envelope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcessTerms {
    /// `sqrt(sigma_K^2 F / (K T))`, optimization.
    pub t1: f64,
    /// `sigma_K^2 / T`, optimization.
    pub t2: f64,
    /// `(sigma_n^2 F^2 / (K c))^{1/3} T^{-(1 - c psi)/3}`, stability.
    pub t3: f64,
    /// `F / (K sqrt(T c))`
    pub t4: f64,
    pub ln_t1: f64,
    pub ln_t2: f64,
    pub ln_t3: f64,
    pub ln_t4: f64,
}

impl ExcessTerms {
    pub fn total(&self) -> f64 {
        self.t1 + self.t2 + self.t3 + self.t4
    }

    /// `ln(total)`, finite when all four log terms are.
    pub fn ln_total(&self) -> f64 {
        let ls = [self.ln_t1, self.ln_t2, self.ln_t3, self.ln_t4];
        let m = ls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + ls.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcessBound {
    pub total: f64,
    pub ln_total: f64,
    pub terms: ExcessTerms,
    pub warnings: Vec<Warning>,
}

fn excess_terms(inputs: &BoundInputs, ln_beta_minus: f64, ln_beta_plus: f64, nu_sq: f64) -> ExcessTerms {
    let ln_k = (inputs.k as f64).ln();
    let ln_t = (inputs.t as f64).ln();
    let ln_c = inputs.c.ln();
    let ln_f = inputs.f_init.ln();
    let ln_sk = inputs.sigma_k_sq().ln();
    let ln_sn = inputs.sigma_n_sq().ln();
    let c_psi = nu_sq * inputs.c_psi();
    let ln_t1 = 0.5 * (ln_beta_minus + ln_sk + ln_f - ln_k - ln_t);
    let ln_t2 = ln_beta_minus + ln_sk - ln_t;
    let ln_t3 = (ln_beta_plus + ln_sn + 2.0 * ln_f - ln_k - ln_c) / 3.0 - (1.0 - c_psi) / 3.0 * ln_t;
    let ln_t4 = ln_f - ln_k - 0.5 * (ln_t + ln_c);
    ExcessTerms { t1: ln_t1.exp(), t2: ln_t2.exp(), t3: ln_t3.exp(), t4: ln_t4.exp(), ln_t1, ln_t2, ln_t3, ln_t4 }
}

fn excess_bound(inputs: &BoundInputs, ln_beta_minus: f64, ln_beta_plus: f64, nu_sq: f64) -> ExcessBound {
    let terms = excess_terms(inputs, ln_beta_minus, ln_beta_plus, nu_sq);
    let mut warnings = Vec::new();
    if !psi_in_regime(inputs.psi()) {
        warnings.push(Warning::PsiOutOfRange);
    }
    if nu_sq * inputs.c_psi() >= 1.0 {
        warnings.push(Warning::OverfittingRegime);
    }
    ExcessBound { total: terms.total(), ln_total: terms.ln_total(), terms, warnings }
}

/// Minimum-excess-risk envelope for server SGD.
pub fn excess_risk_bound_sgd(inputs: &BoundInputs) -> ExcessBound {
    excess_bound(inputs, 0.0, 0.0, 1.0)
}

/// `ln(1 - beta^T)`
pub fn ln_beta_minus(beta: f64, t: usize) -> f64 {
    if beta == 0.0 {
        0.0
    } else {
        (-(t as f64 * beta.ln()).exp()).ln_1p()
    }
}

/// `ln((1 + beta)^T)`
pub fn ln_beta_plus(beta: f64, t: usize) -> f64 {
    t as f64 * beta.ln_1p()
}

/// Minimum-excess-risk envelope for server momentum: the optimization terms
/// are scaled by `1 - beta^T`, the stability term by `(1 + beta)^T` inside
/// the cube root, with exponent `(1 - nu^2 c psi) / 3`.
pub fn excess_risk_bound_fosm(inputs: &BoundInputs) -> ExcessBound {
    excess_bound(inputs, ln_beta_minus(inputs.beta, inputs.t), ln_beta_plus(inputs.beta, inputs.t), inputs.nu * inputs.nu)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub values: Vec<f64>,
    /// First index attaining the minimum: the predicted benign-fitting round.
    pub argmin: usize,
}

/// `((L + gamma) / 2) s[t] + (1 / (2 gamma) + C) g[t]`
pub fn assemble_excess_envelope(l: f64, gamma: f64, c_opt: f64, s: &[f64], g: &[f64]) -> Result<Envelope> {
    positive("gamma", gamma)?;
    if s.len() != g.len() {
        return Err(Error::Precondition(format!("stability curve has {} points, gradient curve {}", s.len(), g.len())));
    }
    if s.is_empty() {
        return Err(Error::Precondition("empty curves".into()));
    }
    let ws = (l + gamma) / 2.0;
    let wg = 1.0 / (2.0 * gamma) + c_opt;
    let values: Vec<f64> = s.iter().zip(g).map(|(s, g)| ws * s + wg * g).collect();
    let mut argmin = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[argmin] {
            argmin = i;
        }
    }
    Ok(Envelope { values, argmin })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
