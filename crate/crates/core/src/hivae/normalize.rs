//! Per-(variable, visit) normalization of group tensors.

use serde::{Deserialize, Serialize};

use super::GroupTensor;
use crate::schema::Likelihood;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CellTransform {
    Identity,
    /// `(x - mean) / sd`.
    Standardize { mean: f64, sd: f64 },
    /// `(ln x - mean) / sd`.
    LogStandardize { mean: f64, sd: f64 },
}

impl CellTransform {
    #[inline]
    pub fn forward(&self, x: f64) -> f64 {
        match *self {
            CellTransform::Identity => x,
            CellTransform::Standardize { mean, sd } => (x - mean) / sd,
            CellTransform::LogStandardize { mean, sd } => (x.ln() - mean) / sd,
        }
    }

    #[inline]
    pub fn inverse(&self, y: f64) -> f64 {
        match *self {
            CellTransform::Identity => y,
            CellTransform::Standardize { mean, sd } => y * sd + mean,
            CellTransform::LogStandardize { mean, sd } => (y * sd + mean).exp(),
        }
    }

    /// Scale of the normalized axis in original (or log) units.
    pub fn scale(&self) -> f64 {
        match *self {
            CellTransform::Identity => 1.0,
            CellTransform::Standardize { sd, .. } | CellTransform::LogStandardize { sd, .. } => sd,
        }
    }
}

/// Transforms for every (visit, variable) cell of a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub n_visits: usize,
    pub n_vars: usize,
    /// Indexed `visit * n_vars + var`.
    pub transforms: Vec<CellTransform>,
    /// Cells whose spread was zero (or that had no observations) and were
    /// standardized with `sd = 1`.
    pub degenerate: Vec<(usize, usize)>,
}

impl NormalizationStats {
    #[inline]
    pub fn get(&self, visit: usize, var: usize) -> &CellTransform {
        &self.transforms[visit * self.n_vars + var]
    }

    /// Stats restricted to a single visit (for per-visit models).
    pub fn visit(&self, visit: usize) -> NormalizationStats {
        NormalizationStats {
            n_visits: 1,
            n_vars: self.n_vars,
            transforms: self.transforms[visit * self.n_vars..(visit + 1) * self.n_vars].to_vec(),
            degenerate: self
                .degenerate
                .iter()
                .filter(|(v, _)| *v == visit)
                .map(|&(_, j)| (0, j))
                .collect(),
        }
    }
}

/// Standardizes real cells and log-standardizes positive cells per (variable,
/// visit) over observed cells (population SD). Masked cells are set to 0.
pub fn normalize(group: &GroupTensor) -> (GroupTensor, NormalizationStats) {
    let (n, v, d) = (group.n, group.n_visits, group.n_vars());
    let mut transforms = Vec::with_capacity(v * d);
    let mut degenerate = Vec::new();
    for t in 0..v {
        for j in 0..d {
            let lik = group.likelihoods[j];
            let obs: Vec<f64> = (0..n)
                .filter(|&i| group.observed(i, t, j))
                .map(|i| {
                    let x = group.value(i, t, j);
                    if lik == Likelihood::Positive {
                        x.ln()
                    } else {
                        x
                    }
                })
                .collect();
            let tr = match lik {
                Likelihood::Real | Likelihood::Positive => {
                    let (mean, sd) = if obs.is_empty() {
                        degenerate.push((t, j));
                        (0.0, 1.0)
                    } else {
                        let m = obs.iter().sum::<f64>() / obs.len() as f64;
                        let var = obs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / obs.len() as f64;
                        if var <= 0.0 || !var.is_finite() {
                            degenerate.push((t, j));
                            (m, 1.0)
                        } else {
                            (m, var.sqrt())
                        }
                    };
                    if lik == Likelihood::Real {
                        CellTransform::Standardize { mean, sd }
                    } else {
                        CellTransform::LogStandardize { mean, sd }
                    }
                }
                _ => {
                    if obs.is_empty() {
                        degenerate.push((t, j));
                    }
                    CellTransform::Identity
                }
            };
            transforms.push(tr);
        }
    }
    let stats = NormalizationStats {
        n_visits: v,
        n_vars: d,
        transforms,
        degenerate,
    };
    (apply(group, &stats), stats)
}

/// Applies existing stats; masked cells become 0.
pub fn apply(group: &GroupTensor, stats: &NormalizationStats) -> GroupTensor {
    let mut out = group.clone();
    for i in 0..group.n {
        for t in 0..group.n_visits {
            for j in 0..group.n_vars() {
                let k = group.index(i, t, j);
                out.values[k] = if group.mask[k] {
                    stats.get(t, j).forward(group.values[k])
                } else {
                    0.0
                };
            }
        }
    }
    out
}

/// Maps normalized observed cells back to data units; masked cells untouched.
pub fn denormalize(group: &GroupTensor, stats: &NormalizationStats) -> GroupTensor {
    let mut out = group.clone();
    for i in 0..group.n {
        for t in 0..group.n_visits {
            for j in 0..group.n_vars() {
                let k = group.index(i, t, j);
                if group.mask[k] {
                    out.values[k] = stats.get(t, j).inverse(group.values[k]);
                }
            }
        }
    }
    out
}
