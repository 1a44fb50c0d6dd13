//! Repeated sampling of synthetic cohorts and the spread of their fitted trends.

use serde::{Deserialize, Serialize};

use super::lmm::{fit_lmm_cubic, predict_trend, TrendModel};
use crate::data::{quantile_sorted, LongTable};
use crate::error::{Error, ErrorKind, Result};
use crate::par::Exec;
use crate::schema::CohortSchema;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Number of synthetic datasets.
    pub k: usize,
    pub outcome: String,
    pub predictor: String,
    pub grid: Vec<f64>,
    pub seed: u64,
    /// Synthetic records with `time` above this value are dropped.
    pub max_time: Option<f64>,
    pub alpha: f64,
}

/// Pointwise mean and 95% band of trend curves over `k` synthetic datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendEnvelope {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Fraction of fitted datasets whose three polynomial terms are all significant.
    pub significant_fraction: f64,
    pub n_fitted: usize,
    pub failures: usize,
    /// Raw coefficients of every successful fit, in dataset order.
    pub coefficients: Vec<[f64; 4]>,
}

impl TrendEnvelope {
    /// Mean width of the band over the grid.
    pub fn mean_width(&self) -> f64 {
        let n = self.grid.len().max(1) as f64;
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).sum::<f64>() / n
    }

    /// Fraction of grid points where `curve` lies inside the band.
    pub fn coverage(&self, curve: &[f64]) -> f64 {
        let n = self.grid.len().max(1) as f64;
        curve
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .filter(|(c, (l, u))| *l <= *c && *c <= *u)
            .count() as f64
            / n
    }
}

fn drop_late_times(mut long: LongTable, schema: &CohortSchema, max_time: f64) -> Result<LongTable> {
    let ti = schema
        .long_index("time")
        .ok_or_else(|| Error::Config("schema lacks `time`".into()))?;
    long.records.retain(|r| r.values[ti].map_or(true, |t| t <= max_time));
    Ok(long)
}

/// Draws `k` datasets from `sampler` (called with derived per-dataset seeds),
/// fits the cubic trend to each and summarizes the curves on the grid.
/// Fits that fail numerically are counted, not fatal.
pub fn repeated_sampling_experiment(
    sampler: &(dyn Fn(u64) -> Result<LongTable> + Sync),
    schema: &CohortSchema,
    config: &ExperimentConfig,
    exec: Exec,
) -> Result<TrendEnvelope> {
    if config.k == 0 || config.grid.is_empty() {
        return Err(Error::Config("experiment needs k > 0 and a non-empty grid".into()));
    }
    let fits: Vec<Result<Option<TrendModel>>> = exec.map(config.k, |i| {
        let data = sampler(seed::derive(config.seed, "resample", i as u64))?;
        let data = match config.max_time {
            Some(m) => drop_late_times(data, schema, m)?,
            None => data,
        };
        match fit_lmm_cubic(&data, schema, &config.outcome, &config.predictor) {
            Ok(m) => Ok(Some(m)),
            Err(e) if e.kind() == ErrorKind::Numerical => {
                log::warn!("dataset {i}: trend fit failed: {e}");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    });
    let mut models = Vec::new();
    let mut failures = 0;
    for f in fits {
        match f? {
            Some(m) => models.push(m),
            None => failures += 1,
        }
    }
    if models.is_empty() {
        return Err(Error::Fit(format!("all {} trend fits failed", config.k)));
    }
    let curves: Vec<Vec<f64>> = models.iter().map(|m| predict_trend(m, &config.grid)).collect();
    let n = curves.len() as f64;
    let g = config.grid.len();
    let (mut mean, mut lower, mut upper) = (vec![0.0; g], vec![0.0; g], vec![0.0; g]);
    for j in 0..g {
        let mut col: Vec<f64> = curves.iter().map(|c| c[j]).collect();
        mean[j] = col.iter().sum::<f64>() / n;
        col.sort_by(f64::total_cmp);
        lower[j] = quantile_sorted(&col, 0.025).min(mean[j]);
        upper[j] = quantile_sorted(&col, 0.975).max(mean[j]);
    }
    let significant = models.iter().filter(|m| m.all_terms_significant(config.alpha)).count();
    Ok(TrendEnvelope {
        grid: config.grid.clone(),
        mean,
        lower,
        upper,
        significant_fraction: significant as f64 / n,
        n_fitted: models.len(),
        failures,
        coefficients: models.iter().map(|m| m.coefficients).collect(),
    })
}
