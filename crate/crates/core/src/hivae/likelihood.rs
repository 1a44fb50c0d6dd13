//! Per-(variable, visit) likelihood heads.
//!
//! Every head reads the visit's slice of the intermediate representation `Y`
//! and the one-hot mixture component `s`:
//!
//! * real / positive: Gaussian on the normalized (log) scale with mean
//!   `a·Y + c[s]` and variance `softplus(r[s]) + VAR_FLOOR`;
//! * count: Poisson with log-rate `a·Y + c[s]`;
//! * categorical: softmax over logits `(0, A·Y + C[s])`;
//! * ordinal: cumulative logit, `P(x <= k) = sigmoid(theta_k[s] - a·Y)` with
//!   thresholds kept increasing through softplus increments.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::params::{dot, sigmoid, softplus, LayoutBuilder, Slot};
use crate::schema::Likelihood;

pub const VAR_FLOOR: f64 = 1e-4;
const MAX_LEVELS: usize = 32;
const LOG_RATE_CLAMP: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub likelihood: Likelihood,
    /// Weights on `Y`, one row per location output.
    pub a: Slot,
    /// Per-component biases, one row per location output.
    pub c: Slot,
    /// Variance parameters (real/positive) or thresholds (ordinal).
    pub r: Slot,
}

impl Head {
    pub fn build(lb: &mut LayoutBuilder, likelihood: Likelihood, y_dim: usize, s_dim: usize) -> Self {
        let (loc, aux) = match likelihood {
            Likelihood::Real | Likelihood::Positive => (1, 1),
            Likelihood::Count => (1, 0),
            Likelihood::Categorical { levels } => (levels - 1, 0),
            Likelihood::Ordinal { levels } => (1, levels - 1),
        };
        if let Some(k) = likelihood.levels() {
            assert!(k <= MAX_LEVELS, "at most {MAX_LEVELS} levels supported");
        }
        let a = lb.matrix(loc, y_dim);
        let c_rows = if matches!(likelihood, Likelihood::Ordinal { .. }) { 0 } else { loc };
        let c = lb.bias(c_rows, s_dim);
        let r = lb.bias(aux, s_dim);
        Self { likelihood, a, c, r }
    }

    #[inline]
    fn loc(&self, p: &[f64], row: usize, y: &[f64], s: usize) -> f64 {
        let w = &p[self.a.at(row, 0)..self.a.at(row, 0) + self.a.cols];
        let bias = if self.c.rows > 0 { p[self.c.at(row, s)] } else { 0.0 };
        dot(w, y) + bias
    }

    /// Accumulates `g * d(loc_row)/d(theta)` and `g * d(loc_row)/dY`.
    #[inline]
    fn loc_backward(&self, p: &[f64], row: usize, y: &[f64], s: usize, g: f64, grad: &mut [f64], dy: &mut [f64]) {
        let base = self.a.at(row, 0);
        for k in 0..self.a.cols {
            grad[base + k] += g * y[k];
            dy[k] += g * p[base + k];
        }
        if self.c.rows > 0 {
            grad[self.c.at(row, s)] += g;
        }
    }

    fn thresholds(&self, p: &[f64], s: usize, out: &mut [f64]) {
        let k1 = self.r.rows;
        let mut acc = p[self.r.at(0, s)];
        out[0] = acc;
        for m in 1..k1 {
            acc += softplus(p[self.r.at(m, s)]);
            out[m] = acc;
        }
    }

    /// Distribution of the cell given `Y` (the visit slice) and component `s`.
    pub fn distribution(&self, p: &[f64], y: &[f64], s: usize) -> CellDist {
        match self.likelihood {
            Likelihood::Real | Likelihood::Positive => CellDist::Gaussian {
                mean: self.loc(p, 0, y, s),
                var: softplus(p[self.r.at(0, s)]) + VAR_FLOOR,
            },
            Likelihood::Count => CellDist::Poisson {
                rate: self.loc(p, 0, y, s).clamp(-LOG_RATE_CLAMP, LOG_RATE_CLAMP).exp(),
            },
            Likelihood::Categorical { levels } => {
                let mut logits = vec![0.0; levels];
                for k in 1..levels {
                    logits[k] = self.loc(p, k - 1, y, s);
                }
                super::params::softmax(&mut logits);
                CellDist::Discrete { probs: logits }
            }
            Likelihood::Ordinal { levels } => {
                let mut th = [0.0; MAX_LEVELS];
                self.thresholds(p, s, &mut th);
                let h = self.loc(p, 0, y, s);
                let mut probs = vec![0.0; levels];
                let mut prev = 0.0;
                for k in 0..levels {
                    let cum = if k + 1 < levels { sigmoid(th[k] - h) } else { 1.0 };
                    probs[k] = (cum - prev).max(0.0);
                    prev = cum;
                }
                CellDist::Discrete { probs }
            }
        }
    }

    /// Log-likelihood of normalized value `x`; accumulates `scale * dlogp`
    /// into `grad` (head parameters) and `dy` (the visit's `Y` slice).
    #[allow(clippy::too_many_arguments)]
    pub fn log_prob_backward(
        &self,
        p: &[f64],
        y: &[f64],
        s: usize,
        x: f64,
        scale: f64,
        grad: &mut [f64],
        dy: &mut [f64],
    ) -> f64 {
        match self.likelihood {
            Likelihood::Real | Likelihood::Positive => {
                let mean = self.loc(p, 0, y, s);
                let raw = p[self.r.at(0, s)];
                let var = softplus(raw) + VAR_FLOOR;
                let diff = x - mean;
                let lp = -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + diff * diff / var);
                if scale != 0.0 {
                    self.loc_backward(p, 0, y, s, scale * diff / var, grad, dy);
                    let dvar = -0.5 / var + 0.5 * diff * diff / (var * var);
                    grad[self.r.at(0, s)] += scale * dvar * sigmoid(raw);
                }
                lp
            }
            Likelihood::Count => {
                let eta = self.loc(p, 0, y, s);
                let clamped = eta.clamp(-LOG_RATE_CLAMP, LOG_RATE_CLAMP);
                let rate = clamped.exp();
                let lp = x * clamped - rate - ln_factorial(x);
                if scale != 0.0 && eta == clamped {
                    self.loc_backward(p, 0, y, s, scale * (x - rate), grad, dy);
                }
                lp
            }
            Likelihood::Categorical { levels } => {
                let mut probs = [0.0; MAX_LEVELS];
                for k in 1..levels {
                    probs[k] = self.loc(p, k - 1, y, s);
                }
                let logits = &mut probs[..levels];
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                let xi = x as usize;
                let lp = logits[xi] - lse;
                if scale != 0.0 {
                    for k in 1..levels {
                        let pk = (logits[k] - lse).exp();
                        let g = if k == xi { 1.0 - pk } else { -pk };
                        self.loc_backward(p, k - 1, y, s, scale * g, grad, dy);
                    }
                }
                lp
            }
            Likelihood::Ordinal { levels } => {
                let mut th = [0.0; MAX_LEVELS];
                self.thresholds(p, s, &mut th);
                let h = self.loc(p, 0, y, s);
                let k = x as usize;
                // Upper and lower cumulative probabilities around level k.
                let (fu, du) = if k + 1 < levels {
                    let f = sigmoid(th[k] - h);
                    (f, f * (1.0 - f))
                } else {
                    (1.0, 0.0)
                };
                let (fl, dl) = if k > 0 {
                    let f = sigmoid(th[k - 1] - h);
                    (f, f * (1.0 - f))
                } else {
                    (0.0, 0.0)
                };
                let prob = (fu - fl).max(1e-300);
                let lp = prob.ln();
                if scale != 0.0 {
                    // d logp / d theta_m for the two thresholds involved.
                    let mut dth = [0.0; MAX_LEVELS];
                    if k + 1 < levels {
                        dth[k] += du / prob;
                    }
                    if k > 0 {
                        dth[k - 1] -= dl / prob;
                    }
                    let dh = -(du - dl) / prob;
                    self.loc_backward(p, 0, y, s, scale * dh, grad, dy);
                    // theta_m = t_0 + sum_{i=1..m} softplus(t_i)
                    let k1 = self.r.rows;
                    let mut tail = 0.0;
                    for m in (0..k1).rev() {
                        tail += dth[m];
                        let raw = p[self.r.at(m, s)];
                        let dm = if m == 0 { tail } else { tail * sigmoid(raw) };
                        grad[self.r.at(m, s)] += scale * dm;
                    }
                }
                lp
            }
        }
    }
}

fn ln_factorial(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x + 1.0)
}

/// Distribution of a single cell on the normalized scale.
#[derive(Debug, Clone, PartialEq)]
pub enum CellDist {
    Gaussian { mean: f64, var: f64 },
    Poisson { rate: f64 },
    Discrete { probs: Vec<f64> },
}

impl CellDist {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            CellDist::Gaussian { mean, var } => {
                let n: f64 = StandardNormal.sample(rng);
                mean + var.sqrt() * n
            }
            CellDist::Poisson { rate } => {
                if *rate <= 0.0 {
                    0.0
                } else {
                    Poisson::new(*rate).map(|d| d.sample(rng)).unwrap_or(0.0)
                }
            }
            CellDist::Discrete { probs } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (k, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return k as f64;
                    }
                }
                // Rounding left a sliver above the cumulative sum: take the
                // last level with positive mass.
                probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as f64
            }
        }
    }

    /// Mode on the normalized scale (for Gaussian cells this is the mean).
    pub fn mode(&self) -> f64 {
        match self {
            CellDist::Gaussian { mean, .. } => *mean,
            CellDist::Poisson { rate } => rate.floor(),
            CellDist::Discrete { probs } => probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (k, &p)| if p > b.1 { (k, p) } else { b })
                .0 as f64,
        }
    }
}
