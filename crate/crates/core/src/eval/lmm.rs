//! Cubic polynomial trend with a random intercept per participant, fitted by
//! maximum likelihood.
//!
//! For a variance ratio `λ = σ²_u / σ²_e` the fixed effects have a closed
//! GLS form and `σ²_e` its ML estimate, so the likelihood is profiled down to
//! one dimension and maximized over `ρ = λ / (1 + λ) ∈ [0, 1)`.

use std::collections::BTreeMap;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::LongTable;
use crate::error::{Error, Result};
use crate::schema::CohortSchema;

/// One observation of a clustered trend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub cluster: u64,
    pub x: f64,
    pub y: f64,
}

/// Fitted cubic trend. `coefficients`, `std_errors` and `p_values` refer to
/// the raw polynomial `b0 + b1 x + b2 x² + b3 x³`; the fit itself runs on the
/// standardized predictor `(x - center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendModel {
    pub outcome: String,
    pub predictor: String,
    pub center: f64,
    pub scale: f64,
    pub standardized_coefficients: [f64; 4],
    pub coefficients: [f64; 4],
    pub std_errors: [f64; 4],
    pub p_values: [f64; 4],
    pub covariance: [[f64; 4]; 4],
    pub sigma2_u: f64,
    pub sigma2_e: f64,
    pub loglik: f64,
    pub n_participants: usize,
    pub n_observations: usize,
}

impl TrendModel {
    /// Linear, quadratic and cubic terms all have `p < alpha`.
    pub fn all_terms_significant(&self, alpha: f64) -> bool {
        self.p_values[1..].iter().all(|&p| p < alpha)
    }
}

#[derive(Debug, Clone)]
struct ClusterStats {
    n: f64,
    xx: Matrix4<f64>,
    x1: Vector4<f64>,
    xy: Vector4<f64>,
    y1: f64,
    yy: f64,
}

struct Profile {
    beta: Vector4<f64>,
    xtwx: Matrix4<f64>,
    sigma2_e: f64,
    loglik: f64,
}

fn features(x: f64) -> Vector4<f64> {
    Vector4::new(1.0, x, x * x, x * x * x)
}

fn cluster_stats(points: &[TrendPoint], center: f64, scale: f64) -> Vec<ClusterStats> {
    let mut clusters: BTreeMap<u64, ClusterStats> = BTreeMap::new();
    for p in points {
        let f = features((p.x - center) / scale);
        let c = clusters.entry(p.cluster).or_insert_with(|| ClusterStats {
            n: 0.0,
            xx: Matrix4::zeros(),
            x1: Vector4::zeros(),
            xy: Vector4::zeros(),
            y1: 0.0,
            yy: 0.0,
        });
        c.n += 1.0;
        c.xx += f * f.transpose();
        c.x1 += f;
        c.xy += f * p.y;
        c.y1 += p.y;
        c.yy += p.y * p.y;
    }
    clusters.into_values().collect()
}

fn profile(stats: &[ClusterStats], n_obs: f64, lambda: f64) -> Option<Profile> {
    let mut xtwx = Matrix4::zeros();
    let mut xtwy = Vector4::zeros();
    let mut ytwy = 0.0;
    let mut logdet = 0.0;
    for c in stats {
        let w = lambda / (1.0 + c.n * lambda);
        xtwx += c.xx - c.x1 * c.x1.transpose() * w;
        xtwy += c.xy - c.x1 * (c.y1 * w);
        ytwy += c.yy - w * c.y1 * c.y1;
        logdet += (1.0 + c.n * lambda).ln();
    }
    let chol = xtwx.cholesky()?;
    let beta = chol.solve(&xtwy);
    let rss = (ytwy - beta.dot(&xtwy)).max(0.0);
    let sigma2_e = (rss / n_obs).max(1e-300);
    let loglik = -0.5 * n_obs * ((2.0 * std::f64::consts::PI).ln() + sigma2_e.ln() + 1.0) - 0.5 * logdet;
    Some(Profile {
        beta,
        xtwx,
        sigma2_e,
        loglik,
    })
}

fn lambda_of(rho: f64) -> f64 {
    rho / (1.0 - rho)
}

/// Profile log-likelihood at variance ratio `λ = σ²_u / σ²_e`. Exposed for
/// independent checks of the optimizer.
pub fn profile_loglik(points: &[TrendPoint], lambda: f64) -> Result<f64> {
    let (center, scale) = standardization(points)?;
    let stats = cluster_stats(points, center, scale);
    profile(&stats, points.len() as f64, lambda)
        .map(|p| p.loglik)
        .ok_or_else(|| Error::Fit("fixed-effect design is singular".into()))
}

fn standardization(points: &[TrendPoint]) -> Result<(f64, f64)> {
    let n = points.len() as f64;
    let center = points.iter().map(|p| p.x).sum::<f64>() / n;
    let scale = (points.iter().map(|p| (p.x - center).powi(2)).sum::<f64>() / n).sqrt();
    if !(scale > 0.0) || !center.is_finite() {
        return Err(Error::Fit("predictor has no spread".into()));
    }
    Ok((center, scale))
}

const GRID: usize = 200;

/// Maximizes the profile likelihood over `ρ`: a coarse grid, golden-section
/// refinement around the best grid point, and the `ρ = 0` boundary.
fn maximize(stats: &[ClusterStats], n_obs: f64) -> Result<(f64, Profile)> {
    let eval = |rho: f64| profile(stats, n_obs, lambda_of(rho)).map(|p| p.loglik).unwrap_or(f64::NEG_INFINITY);
    let mut grid: Vec<f64> = (0..GRID).map(|k| k as f64 / GRID as f64).collect();
    grid.extend([0.999, 0.9999, 0.99999]);
    let values: Vec<f64> = grid.iter().map(|&r| eval(r)).collect();
    let best = (0..grid.len())
        .max_by(|&a, &b| values[a].total_cmp(&values[b]))
        .expect("grid is not empty");
    if !values[best].is_finite() {
        return Err(Error::Fit("likelihood is not finite on the variance grid".into()));
    }
    if best == grid.len() - 1 {
        return Err(Error::NonConvergence(
            "variance ratio diverges; residual variance collapses to zero".into(),
        ));
    }
    let mut lo = if best == 0 { 0.0 } else { grid[best - 1] };
    let mut hi = grid[best + 1];
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (eval(a), eval(b));
    while hi - lo > 1e-12 {
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = eval(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = eval(a);
        }
    }
    let mut rho = 0.5 * (lo + hi);
    if eval(0.0) >= eval(rho) {
        rho = 0.0;
    }
    let p = profile(stats, n_obs, lambda_of(rho)).ok_or_else(|| Error::Fit("fixed-effect design is singular".into()))?;
    Ok((rho, p))
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Maps standardized coefficients to raw ones: `raw = T · std`.
fn raw_transform(center: f64, scale: f64) -> Matrix4<f64> {
    let mut t = Matrix4::zeros();
    for k in 0..4 {
        for j in 0..=k {
            t[(j, k)] = binomial(k, j) * (-center).powi((k - j) as i32) / scale.powi(k as i32);
        }
    }
    t
}

/// Fits the cubic random-intercept model to clustered points.
pub fn fit_lmm_points(points: &[TrendPoint], outcome: &str, predictor: &str) -> Result<TrendModel> {
    if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::InvalidInput("trend data contain non-finite values".into()));
    }
    let mut distinct: Vec<f64> = points.iter().map(|p| p.x).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::Fit(format!(
            "a cubic needs at least 4 distinct predictor values, found {}",
            distinct.len()
        )));
    }
    let (center, scale) = standardization(points)?;
    let stats = cluster_stats(points, center, scale);
    if stats.len() < 2 {
        return Err(Error::Fit("a random intercept needs at least two participants".into()));
    }
    let n_obs = points.len() as f64;
    if points.len() <= 4 + 1 {
        return Err(Error::Fit("too few observations for a cubic mixed model".into()));
    }
    let (rho, p) = maximize(&stats, n_obs)?;
    let lambda = lambda_of(rho);
    let inv = p
        .xtwx
        .try_inverse()
        .ok_or_else(|| Error::Fit("fixed-effect information is singular".into()))?;
    let cov_std = inv * p.sigma2_e;
    let t = raw_transform(center, scale);
    let raw = t * p.beta;
    let cov = t * cov_std * t.transpose();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut out = TrendModel {
        outcome: outcome.to_string(),
        predictor: predictor.to_string(),
        center,
        scale,
        standardized_coefficients: [0.0; 4],
        coefficients: [0.0; 4],
        std_errors: [0.0; 4],
        p_values: [0.0; 4],
        covariance: [[0.0; 4]; 4],
        sigma2_u: lambda * p.sigma2_e,
        sigma2_e: p.sigma2_e,
        loglik: p.loglik,
        n_participants: stats.len(),
        n_observations: points.len(),
    };
    for j in 0..4 {
        out.standardized_coefficients[j] = p.beta[j];
        out.coefficients[j] = raw[j];
        let se = cov[(j, j)].max(0.0).sqrt();
        out.std_errors[j] = se;
        out.p_values[j] = if se > 0.0 {
            (2.0 * normal.sf((raw[j] / se).abs())).min(1.0)
        } else if raw[j] == 0.0 {
            1.0
        } else {
            0.0
        };
        for k in 0..4 {
            out.covariance[j][k] = cov[(j, k)];
        }
    }
    Ok(out)
}

/// Collects `(participant, predictor, outcome)` points where both are observed.
pub fn trend_points(long: &LongTable, schema: &CohortSchema, outcome: &str, predictor: &str) -> Result<Vec<TrendPoint>> {
    let idx = |name: &str| {
        schema
            .long_index(name)
            .ok_or_else(|| Error::Config(format!("unknown variable `{name}`")))
    };
    let (yi, xi) = (idx(outcome)?, idx(predictor)?);
    Ok(long
        .records
        .iter()
        .filter_map(|r| {
            Some(TrendPoint {
                cluster: r.pers_id,
                x: r.values[xi]?,
                y: r.values[yi]?,
            })
        })
        .collect())
}

/// Fits `outcome ~ cubic(predictor) + (1 | participant)` to a long table.
pub fn fit_lmm_cubic(long: &LongTable, schema: &CohortSchema, outcome: &str, predictor: &str) -> Result<TrendModel> {
    let points = trend_points(long, schema, outcome, predictor)?;
    fit_lmm_points(&points, outcome, predictor)
}

/// Fixed-effect curve on `grid`.
pub fn predict_trend(model: &TrendModel, grid: &[f64]) -> Vec<f64> {
    let c = &model.coefficients;
    grid.iter().map(|&x| c[0] + x * (c[1] + x * (c[2] + x * c[3]))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal as RNormal, Uniform};

    const BETA: [f64; 4] = [8.0, 1.2, -0.08, 0.001];

    fn cubic(b: &[f64; 4], x: f64) -> f64 {
        b[0] + b[1] * x + b[2] * x * x + b[3] * x * x * x
    }

    fn simulate(m: usize, per: usize, su: f64, se: f64, seed: u64) -> Vec<TrendPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nu = RNormal::new(0.0, su.max(1e-300)).unwrap();
        let ne = RNormal::new(0.0, se.max(1e-300)).unwrap();
        let offset = Uniform::new(0.0, 2.0);
        let mut out = Vec::new();
        for i in 0..m {
            let u = if su > 0.0 { nu.sample(&mut rng) } else { 0.0 };
            let start = 3.0 + offset.sample(&mut rng);
            for k in 0..per {
                let x = start + 1.5 * k as f64;
                let e = if se > 0.0 { ne.sample(&mut rng) } else { 0.0 };
                out.push(TrendPoint {
                    cluster: i as u64,
                    x,
                    y: cubic(&BETA, x) + u + e,
                });
            }
        }
        out
    }

    #[test]
    fn noiseless_data_recover_coefficients() {
        let pts = simulate(30, 8, 0.0, 0.0, 1);
        let m = fit_lmm_points(&pts, "y", "x").unwrap();
        for j in 0..4 {
            assert!((m.coefficients[j] - BETA[j]).abs() < 1e-8, "{j}: {}", m.coefficients[j]);
        }
        let grid = [3.0, 7.5, 12.0];
        for (g, p) in grid.iter().zip(predict_trend(&m, &grid)) {
            assert!((p - cubic(&BETA, *g)).abs() < 1e-8);
        }
    }

    #[test]
    fn simulation_recovers_parameters() {
        let (su, se) = (2.0, 1.5);
        let pts = simulate(200, 10, su, se, 7);
        let m = fit_lmm_points(&pts, "y", "x").unwrap();
        for j in 0..4 {
            let z = (m.coefficients[j] - BETA[j]) / m.std_errors[j];
            assert!(z.abs() < 3.0, "term {j}: z = {z}");
        }
        // Large-sample standard errors of the variance components.
        let (n, k) = (2000.0f64, 200.0f64);
        let se_e = se * se * (2.0 / (n - k)).sqrt();
        let se_u = (2.0 / k).sqrt() * (su * su + se * se / 10.0);
        assert!((m.sigma2_e - se * se).abs() < 3.0 * se_e, "{}", m.sigma2_e);
        assert!((m.sigma2_u - su * su).abs() < 3.0 * se_u, "{}", m.sigma2_u);
        assert!(m.all_terms_significant(0.05));
    }

    #[test]
    fn optimizer_matches_brute_force_grid() {
        let pts = simulate(20, 6, 1.0, 2.0, 11);
        let m = fit_lmm_points(&pts, "y", "x").unwrap();
        let brute = (0..10_000)
            .map(|k| profile_loglik(&pts, lambda_of(k as f64 * 1e-4)).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(m.loglik >= brute - 1e-9, "{} < {}", m.loglik, brute);
        assert!(m.loglik - brute < 1e-6, "{} vs {}", m.loglik, brute);
    }

    #[test]
    fn no_random_effect_reduces_to_ols() {
        // Every cluster shares the same design and the data carry no
        // between-cluster variance, so the ML ratio sits at 0.
        let mut pts = Vec::new();
        let xs = [3.0, 4.0, 5.5, 7.0, 9.0, 12.0];
        let noise = [0.3, -0.2, 0.1, -0.4, 0.25, -0.05];
        for c in 0..4u64 {
            for (k, &x) in xs.iter().enumerate() {
                let e = noise[(k + c as usize) % 6];
                pts.push(TrendPoint { cluster: c, x, y: cubic(&BETA, x) + e });
            }
        }
        let m = fit_lmm_points(&pts, "y", "x").unwrap();
        assert_eq!(m.sigma2_u, 0.0);
        // OLS oracle through normal equations on raw powers.
        let mut xtx = Matrix4::zeros();
        let mut xty = Vector4::zeros();
        for p in &pts {
            let f = features(p.x);
            xtx += f * f.transpose();
            xty += f * p.y;
        }
        let ols = xtx.lu().solve(&xty).unwrap();
        for j in 0..4 {
            assert!((m.coefficients[j] - ols[j]).abs() < 1e-8, "{j}");
        }
    }

    #[test]
    fn non_identifiable_designs_fail() {
        let pts: Vec<TrendPoint> = (0..30)
            .map(|i| TrendPoint {
                cluster: i % 5,
                x: (i % 3) as f64,
                y: i as f64,
            })
            .collect();
        assert!(matches!(fit_lmm_points(&pts, "y", "x"), Err(Error::Fit(_))));
        let one_cluster: Vec<TrendPoint> = (0..10)
            .map(|i| TrendPoint {
                cluster: 0,
                x: i as f64,
                y: i as f64,
            })
            .collect();
        assert!(matches!(fit_lmm_points(&one_cluster, "y", "x"), Err(Error::Fit(_))));
    }

    #[test]
    fn raw_transform_inverts_standardization() {
        let (c, s) = (7.3, 2.1);
        let t = raw_transform(c, s);
        let b = Vector4::new(0.4, -1.0, 0.7, 0.2);
        let raw = t * b;
        for x in [-2.0, 0.0, 5.0, 11.0] {
            let z = (x - c) / s;
            let lhs = b[0] + b[1] * z + b[2] * z * z + b[3] * z * z * z;
            let rhs = raw[0] + raw[1] * x + raw[2] * x * x + raw[3] * x * x * x;
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
