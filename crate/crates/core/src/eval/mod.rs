//! Comparison of real and synthetic cohorts: marginal distributions,
//! correlation structure, planted dependencies and mixed-model trends.

mod experiment;
mod lmm;
pub mod plots;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use experiment::{repeated_sampling_experiment, ExperimentConfig, TrendEnvelope};
pub use lmm::{fit_lmm_cubic, fit_lmm_points, predict_trend, profile_loglik, trend_points, TrendModel, TrendPoint};
pub use report::{evaluate, ErrorSummary, EvaluationReport, MethodComparison};

use crate::data::{quantile_sorted, WideMatrix};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::schema::{CohortSchema, Likelihood};

/// Histogram bins shared by a real and a synthetic sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningRule {
    pub n_bins: usize,
    /// Ascending edges (`n_bins + 1`); empty for level-indexed bins.
    pub edges: Vec<f64>,
    /// Categorical and ordinal variables bin by level.
    pub levels: Option<usize>,
    /// Pooled data were constant.
    pub degenerate: bool,
}

impl BinningRule {
    pub fn categorical(levels: usize) -> Self {
        Self {
            n_bins: levels,
            edges: Vec::new(),
            levels: Some(levels),
            degenerate: false,
        }
    }

    fn bin(&self, x: f64) -> usize {
        if self.levels.is_some() {
            return (x.max(0.0) as usize).min(self.n_bins - 1);
        }
        if self.n_bins == 1 {
            return 0;
        }
        let lo = self.edges[0];
        let hi = self.edges[self.n_bins];
        let k = ((x - lo) / (hi - lo) * self.n_bins as f64).floor();
        (k.max(0.0) as usize).min(self.n_bins - 1)
    }

    pub fn histogram(&self, values: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.n_bins];
        for &x in values {
            h[self.bin(x)] += 1.0;
        }
        let total: f64 = h.iter().sum();
        if total > 0.0 {
            h.iter_mut().for_each(|v| *v /= total);
        }
        h
    }
}

/// Sturges bin count for `n` values.
pub fn sturges_bins(n: usize) -> usize {
    (n as f64).log2().ceil() as usize + 1
}

/// Freedman-Diaconis bin count over the sample range, `None` if IQR is 0.
pub fn freedman_diaconis_bins(values: &[f64]) -> Option<usize> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let range = sorted.last()? - sorted.first()?;
    if iqr <= 0.0 || range <= 0.0 {
        return None;
    }
    let width = 2.0 * iqr * (sorted.len() as f64).powf(-1.0 / 3.0);
    Some(((range / width).ceil() as usize).max(1))
}

/// Equal-width bins over the pooled range; the count is the larger of the
/// Sturges and Freedman-Diaconis counts of the real sample.
pub fn bin_edges(real: &[f64], synth: &[f64]) -> Result<BinningRule> {
    let finite = |v: &[f64]| v.iter().copied().filter(|x| x.is_finite()).collect::<Vec<f64>>();
    let r = finite(real);
    let s = finite(synth);
    if r.len() < 2 {
        return Err(Error::InvalidInput("binning needs at least two finite real values".into()));
    }
    let n_bins = sturges_bins(r.len()).max(freedman_diaconis_bins(&r).unwrap_or(0));
    let lo = r.iter().chain(&s).copied().fold(f64::INFINITY, f64::min);
    let hi = r.iter().chain(&s).copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(BinningRule {
            n_bins: 1,
            edges: vec![lo, lo],
            levels: None,
            degenerate: true,
        });
    }
    let edges = (0..=n_bins)
        .map(|k| if k == n_bins { hi } else { lo + (hi - lo) * k as f64 / n_bins as f64 })
        .collect();
    Ok(BinningRule {
        n_bins,
        edges,
        levels: None,
        degenerate: false,
    })
}

fn kl2(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&a, _)| a > 0.0)
        .map(|(a, b)| a * (a / b).log2())
        .sum()
}

/// Jensen-Shannon divergence (base 2) of two probability vectors.
pub fn js_from_probabilities(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl2(p, &m) + 0.5 * kl2(q, &m)).clamp(0.0, 1.0)
}

/// Jensen-Shannon divergence of two samples binned by `rule`.
pub fn js_divergence(real: &[f64], synth: &[f64], rule: &BinningRule) -> Result<f64> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::InvalidInput("divergence needs two non-empty samples".into()));
    }
    Ok(js_from_probabilities(&rule.histogram(real), &rule.histogram(synth)))
}

/// Observed values of longitudinal variable `var` at `visit`.
pub fn observed_cells(wide: &WideMatrix, schema: &CohortSchema, visit: usize, var: usize) -> Vec<f64> {
    let col = schema.wide_col(visit, var);
    (0..wide.n_rows).filter_map(|i| wide.get(i, col)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsEntry {
    pub variable: String,
    pub visit: usize,
    pub js: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsSummary {
    pub mean: f64,
    pub sd: f64,
    pub entries: Vec<JsEntry>,
    /// Mean and SD over visits, per variable.
    pub per_variable: BTreeMap<String, (f64, f64)>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// JS divergence for every (variable, visit) pair with at least two observed
/// real values and one synthetic value, summarized by mean and SD.
pub fn js_summary(real: &WideMatrix, synth: &WideMatrix, schema: &CohortSchema) -> Result<JsSummary> {
    if real.n_cols != schema.wide_width() || synth.n_cols != schema.wide_width() {
        return Err(Error::Shape("wide matrices do not match the schema".into()));
    }
    let mut entries = Vec::new();
    for var in 0..schema.n_longitudinal() {
        let spec = schema.long_var(var);
        for visit in 0..schema.n_visits {
            let r = observed_cells(real, schema, visit, var);
            let s = observed_cells(synth, schema, visit, var);
            if r.len() < 2 || s.is_empty() {
                continue;
            }
            let rule = match spec.likelihood {
                Likelihood::Categorical { levels } | Likelihood::Ordinal { levels } => BinningRule::categorical(levels),
                _ => bin_edges(&r, &s)?,
            };
            entries.push(JsEntry {
                variable: spec.name.clone(),
                visit,
                js: js_divergence(&r, &s, &rule)?,
            });
        }
    }
    let all: Vec<f64> = entries.iter().map(|e| e.js).collect();
    let (mean, sd) = mean_sd(&all);
    let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for e in &entries {
        grouped.entry(e.variable.clone()).or_default().push(e.js);
    }
    let per_variable = grouped.into_iter().map(|(k, v)| (k, mean_sd(&v))).collect();
    Ok(JsSummary {
        mean,
        sd,
        entries,
        per_variable,
    })
}

/// Pairwise-complete Pearson correlations over the longitudinal columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrMatrix {
    pub names: Vec<String>,
    /// Row-major `n x n`.
    pub values: Vec<f64>,
    /// Pairs set to 0 for lack of joint observations or variance.
    pub flagged: Vec<(usize, usize)>,
}

impl CorrMatrix {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim() + j]
    }

    pub fn frobenius(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Variable-by-variable matrix averaging the same-visit blocks of a
    /// visit-major matrix with `n_vars` variables per visit.
    pub fn visit_block_mean(&self, n_vars: usize) -> CorrMatrix {
        let visits = self.dim() / n_vars.max(1);
        let mut values = vec![0.0; n_vars * n_vars];
        for t in 0..visits {
            for a in 0..n_vars {
                for b in 0..n_vars {
                    values[a * n_vars + b] += self.get(t * n_vars + a, t * n_vars + b) / visits as f64;
                }
            }
        }
        let names = self.names[..n_vars.min(self.dim())]
            .iter()
            .map(|n| n.rsplit_once("_v").map_or(n.clone(), |(head, _)| head.to_string()))
            .collect();
        CorrMatrix {
            names,
            values,
            flagged: Vec::new(),
        }
    }
}

/// Pearson correlation over rows where both columns are observed;
/// `None` with fewer than 3 joint observations or zero variance.
pub fn pairwise_pearson(a: &[f64], ma: &[bool], b: &[f64], mb: &[bool]) -> Option<f64> {
    let mut n = 0.0;
    let (mut sa, mut sb) = (0.0, 0.0);
    for k in 0..a.len() {
        if ma[k] && mb[k] {
            n += 1.0;
            sa += a[k];
            sb += b[k];
        }
    }
    if n < 3.0 {
        return None;
    }
    let (ma_, mb_) = (sa / n, sb / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for k in 0..a.len() {
        if ma[k] && mb[k] {
            let (da, db) = (a[k] - ma_, b[k] - mb_);
            sab += da * db;
            saa += da * da;
            sbb += db * db;
        }
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation matrix over all longitudinal columns (identifiers and the
/// static covariates are excluded).
pub fn pearson_matrix(wide: &WideMatrix, schema: &CohortSchema, exec: Exec) -> CorrMatrix {
    let first = schema.n_static();
    let cols: Vec<usize> = (first..wide.n_cols).collect();
    let names: Vec<String> = schema.wide_column_names()[first..].to_vec();
    let data: Vec<(Vec<f64>, Vec<bool>)> = cols
        .iter()
        .map(|&c| {
            let v: Vec<f64> = (0..wide.n_rows).map(|i| wide.get(i, c).unwrap_or(0.0)).collect();
            let m: Vec<bool> = (0..wide.n_rows).map(|i| wide.mask[i * wide.n_cols + c]).collect();
            (v, m)
        })
        .collect();
    let d = cols.len();
    let rows: Vec<Vec<Option<f64>>> = exec.map(d, |i| {
        (0..d)
            .map(|j| {
                if j < i {
                    None
                } else {
                    pairwise_pearson(&data[i].0, &data[i].1, &data[j].0, &data[j].1)
                }
            })
            .collect()
    });
    let mut values = vec![0.0; d * d];
    let mut flagged = Vec::new();
    for i in 0..d {
        for j in i..d {
            let r = match rows[i][j] {
                Some(r) => r,
                None if i == j => 1.0,
                None => {
                    flagged.push((i, j));
                    0.0
                }
            };
            let r = if i == j { 1.0 } else { r };
            values[i * d + j] = r;
            values[j * d + i] = r;
        }
    }
    CorrMatrix { names, values, flagged }
}

/// Relative error `||R - S||_F / ||R||_F`.
pub fn corr_relative_error(real: &CorrMatrix, synth: &CorrMatrix) -> Result<f64> {
    if real.values.len() != synth.values.len() {
        return Err(Error::Shape(format!(
            "correlation matrices are {} and {} wide",
            real.dim(),
            synth.dim()
        )));
    }
    let norm = real.frobenius();
    if norm <= 0.0 {
        return Err(Error::InvalidInput("real correlation matrix has zero norm".into()));
    }
    let diff: f64 = real
        .values
        .iter()
        .zip(&synth.values)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(diff / norm)
}

/// 1 -> 0 transitions of an indicator across consecutive attended visits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneReport {
    pub rate: f64,
    pub violations: usize,
    pub transitions: usize,
    /// Violations per participant, in row order.
    pub per_participant: Vec<usize>,
}

/// Counts 1 -> 0 changes between consecutive observed values of `trajectory`.
pub fn monotone_violations(trajectory: &[Option<f64>]) -> Result<(usize, usize)> {
    let obs: Vec<f64> = trajectory.iter().flatten().copied().collect();
    if let Some(x) = obs.iter().find(|&&x| x != 0.0 && x != 1.0) {
        return Err(Error::InvalidInput(format!("indicator value {x} is not binary")));
    }
    let transitions = obs.len().saturating_sub(1);
    let violations = obs.windows(2).filter(|w| w[0] == 1.0 && w[1] == 0.0).count();
    Ok((violations, transitions))
}

pub fn monotone_violation_rate(wide: &WideMatrix, schema: &CohortSchema, var: &str) -> Result<MonotoneReport> {
    let j = schema
        .long_index(var)
        .ok_or_else(|| Error::Config(format!("unknown variable `{var}`")))?;
    let mut per_participant = Vec::with_capacity(wide.n_rows);
    let (mut violations, mut transitions) = (0, 0);
    for i in 0..wide.n_rows {
        let traj: Vec<Option<f64>> = (0..schema.n_visits)
            .map(|t| wide.get(i, schema.wide_col(t, j)))
            .collect();
        let (v, t) = monotone_violations(&traj)?;
        per_participant.push(v);
        violations += v;
        transitions += t;
    }
    let rate = if transitions == 0 { 0.0 } else { violations as f64 / transitions as f64 };
    Ok(MonotoneReport {
        rate,
        violations,
        transitions,
        per_participant,
    })
}

/// `Δtime − Δage` over consecutive visits where both are observed.
pub fn lockstep_errors(wide: &WideMatrix, schema: &CohortSchema) -> Result<Vec<f64>> {
    let age = schema.long_index("age").ok_or_else(|| Error::Config("schema lacks `age`".into()))?;
    let time = schema.long_index("time").ok_or_else(|| Error::Config("schema lacks `time`".into()))?;
    let mut out = Vec::new();
    for i in 0..wide.n_rows {
        let pairs: Vec<(f64, f64)> = (0..schema.n_visits)
            .filter_map(|t| {
                Some((
                    wide.get(i, schema.wide_col(t, age))?,
                    wide.get(i, schema.wide_col(t, time))?,
                ))
            })
            .collect();
        for w in pairs.windows(2) {
            out.push((w[1].1 - w[0].1) - (w[1].0 - w[0].0));
        }
    }
    Ok(out)
}

/// `EW_p + Fett_p + KH_p − 100` for every visit where all three are observed.
pub fn closure_errors(wide: &WideMatrix, schema: &CohortSchema) -> Result<Vec<f64>> {
    let idx = |name: &str| {
        schema
            .long_index(name)
            .ok_or_else(|| Error::Config(format!("schema lacks `{name}`")))
    };
    let (a, b, c) = (idx("EW_p")?, idx("Fett_p")?, idx("KH_p")?);
    let mut out = Vec::new();
    for i in 0..wide.n_rows {
        for t in 0..schema.n_visits {
            if let (Some(x), Some(y), Some(z)) = (
                wide.get(i, schema.wide_col(t, a)),
                wide.get(i, schema.wide_col(t, b)),
                wide.get(i, schema.wide_col(t, c)),
            ) {
                out.push(x + y + z - 100.0);
            }
        }
    }
    Ok(out)
}
