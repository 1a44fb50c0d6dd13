//! Training loop, dataset encoding, decoding and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{HivaeModel, Workspace};
use super::normalize::{apply, normalize, CellTransform};
use super::params::Adam;
use super::{CellDist, EncoderStrategy, GroupTensor, HivaeConfig, LatentCode};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::schema::Likelihood;
use crate::seed;

const CHECKPOINT_FORMAT: u32 = 1;

/// All autoencoders of one group: a single model, or one per visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format: u32,
    pub group: String,
    pub strategy: EncoderStrategy,
    pub schema_hash: String,
    pub models: Vec<HivaeModel>,
    /// Mean per-participant loss of every epoch, per model.
    pub loss_traces: Vec<Vec<f64>>,
}

impl TrainedModel {
    pub fn n_visits(&self) -> usize {
        match self.strategy {
            EncoderStrategy::PerVisit => self.models.len(),
            _ => self.models[0].arch.n_visits,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.models[0].names
    }

    pub fn likelihoods(&self) -> &[Likelihood] {
        &self.models[0].arch.likelihoods
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Loads a checkpoint and checks it was trained against `schema_hash`.
    pub fn load(path: &Path, schema_hash: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let model: TrainedModel = serde_json::from_str(&text)?;
        if model.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "checkpoint {} has format {}, expected {CHECKPOINT_FORMAT}",
                path.display(),
                model.format
            )));
        }
        if model.schema_hash != schema_hash {
            return Err(Error::SchemaMismatch {
                expected: schema_hash.to_string(),
                found: model.schema_hash,
            });
        }
        Ok(model)
    }
}

/// Trains the group's autoencoder(s). Per-visit models are independent and
/// run through `exec`; each model's own optimization is sequential.
pub fn train(
    group: &GroupTensor,
    config: &HivaeConfig,
    group_name: &str,
    schema_hash: &str,
    exec: Exec,
) -> Result<TrainedModel> {
    config.validate()?;
    group.validate()?;
    if group.n == 0 {
        return Err(Error::Empty(format!("group `{group_name}` has no participants")));
    }
    let results: Vec<Result<(HivaeModel, Vec<f64>)>> = match config.encoder_strategy {
        EncoderStrategy::PerVisit => exec.map(group.n_visits, |t| {
            let mut cfg = config.clone();
            cfg.seed = seed::derive(config.seed, "visit-model", t as u64);
            train_one(&group.visit_slice(t), &cfg, Some(t))
        }),
        _ => vec![train_one(group, config, None)],
    };
    let mut models = Vec::with_capacity(results.len());
    let mut loss_traces = Vec::with_capacity(results.len());
    for r in results {
        let (m, trace) = r.map_err(|e| match e {
            Error::Divergence { epoch, batch, trace } => {
                log::error!("group `{group_name}` diverged at epoch {epoch}, batch {batch}");
                Error::Divergence { epoch, batch, trace }
            }
            other => other,
        })?;
        models.push(m);
        loss_traces.push(trace);
    }
    Ok(TrainedModel {
        format: CHECKPOINT_FORMAT,
        group: group_name.to_string(),
        strategy: config.encoder_strategy,
        schema_hash: schema_hash.to_string(),
        models,
        loss_traces,
    })
}

/// Trains one model on participants with at least one observed cell.
fn train_one(group: &GroupTensor, config: &HivaeConfig, visit: Option<usize>) -> Result<(HivaeModel, Vec<f64>)> {
    let (norm, stats) = normalize(group);
    let rows: Vec<usize> = (0..norm.n).filter(|&i| norm.has_observation(i)).collect();
    let mut model = HivaeModel::new(config, group.names.clone(), &group.likelihoods, stats, visit);
    if rows.is_empty() {
        log::warn!("no observed cells for visit {visit:?}; keeping initial parameters");
        return Ok((model, Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, "train", 0));
    let mut opt = Adam::new(model.params.len(), config.learning_rate, config.clip_norm);
    let mut ws = Workspace::new(&model.arch);
    let mut grad = vec![0.0; model.params.len()];
    let mut order = rows.clone();
    let mut trace = Vec::with_capacity(config.epochs);
    let z = config.z_dim;
    let mut eps = vec![0.0; z];
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            grad.fill(0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                for e in eps.iter_mut() {
                    *e = StandardNormal.sample(&mut rng);
                }
                let (x, m) = norm.row(i);
                batch_loss += model.loss(&model.params, x, m, &eps, Some(&mut grad), &mut ws).total;
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                trace.push(f64::NAN);
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    trace,
                });
            }
            epoch_loss += batch_loss;
            let k = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= k);
            opt.update(&mut model.params, &mut grad);
        }
        trace.push(epoch_loss / rows.len() as f64);
    }
    Ok((model, trace))
}

/// Deterministic embeddings of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    /// `codes[m][i]`: participant `i` under model `m` (one model, or one per visit).
    pub codes: Vec<Vec<LatentCode>>,
    /// Whether participant `i` had any observed cell in model `m`'s input.
    pub observed: Vec<Vec<bool>>,
}

/// Encodes every participant: `s = argmax q(s|x)`, `z` = posterior mean.
pub fn encode_dataset(trained: &TrainedModel, group: &GroupTensor, exec: Exec) -> Result<Embeddings> {
    if group.names.as_slice() != trained.names() || group.n_visits != trained.n_visits() {
        return Err(Error::Shape(format!(
            "group tensor does not match the variables of model `{}`",
            trained.group
        )));
    }
    let per_model: Vec<(Vec<LatentCode>, Vec<bool>)> = exec.map(trained.models.len(), |k| {
        let model = &trained.models[k];
        let input = match model.visit {
            Some(t) => group.visit_slice(t),
            None => group.clone(),
        };
        let norm = apply(&input, &model.stats);
        let mut ws = Workspace::new(&model.arch);
        let mut codes = Vec::with_capacity(norm.n);
        let mut observed = Vec::with_capacity(norm.n);
        for i in 0..norm.n {
            let (x, m) = norm.row(i);
            codes.push(model.posterior_with(x, m, &mut ws).code());
            observed.push(norm.has_observation(i));
        }
        (codes, observed)
    });
    let (codes, observed) = per_model.into_iter().unzip();
    Ok(Embeddings { codes, observed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Draw each cell from its likelihood.
    #[default]
    Sample,
    /// Take each cell's distribution mode.
    Mode,
}

/// Decodes one code into data units for the model's visits (visit-major,
/// `n_visits x n_vars`).
pub fn decode_sample<R: Rng>(model: &HivaeModel, code: &LatentCode, mode: DecodeMode, rng: &mut R) -> Vec<f64> {
    let d = model.arch.n_vars();
    model
        .cell_distributions(code)
        .into_iter()
        .enumerate()
        .map(|(c, dist)| {
            let tr = model.stats.get(c / d, c % d);
            match mode {
                DecodeMode::Sample => tr.inverse(dist.sample(rng)),
                DecodeMode::Mode => mode_in_data_units(&dist, tr),
            }
        })
        .collect()
}

fn mode_in_data_units(dist: &CellDist, tr: &CellTransform) -> f64 {
    match (dist, *tr) {
        // Log-normal mode: exp(mu - sigma^2) on the log scale.
        (CellDist::Gaussian { mean, var }, CellTransform::LogStandardize { mean: m, sd }) => {
            (mean * sd + m - var * sd * sd).exp()
        }
        _ => tr.inverse(dist.mode()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_group(n: usize) -> GroupTensor {
        GroupTensor {
            n,
            n_visits: 2,
            names: vec!["c".into(), "r".into()],
            likelihoods: vec![Likelihood::Categorical { levels: 3 }, Likelihood::Real],
            values: [1.0, 5.0].repeat(2 * n),
            mask: vec![true; 4 * n],
        }
    }

    fn quick(strategy: EncoderStrategy, s_dim: usize, epochs: usize) -> HivaeConfig {
        HivaeConfig {
            s_dim,
            epochs,
            batch_size: 16,
            lstm_dim: 6,
            encoder_strategy: strategy,
            seed: 17,
            ..Default::default()
        }
    }

    #[test]
    fn model_counts_per_strategy() {
        let g = GroupTensor {
            n_visits: 16,
            values: vec![1.0; 3 * 16 * 2],
            mask: vec![true; 3 * 16 * 2],
            n: 3,
            ..constant_group(3)
        };
        let pv = train(&g, &quick(EncoderStrategy::PerVisit, 1, 2), "g", "h", Exec::Sequential).unwrap();
        assert_eq!(pv.models.len(), 16);
        let rec = train(&g, &quick(EncoderStrategy::Recurrent, 1, 2), "g", "h", Exec::Sequential).unwrap();
        assert_eq!(rec.models.len(), 1);
        let emb = encode_dataset(&pv, &g, Exec::Sequential).unwrap();
        assert_eq!(emb.codes.len() * emb.codes[0].len(), 3 * 16);
        let emb = encode_dataset(&rec, &g, Exec::Sequential).unwrap();
        assert_eq!(emb.codes.len() * emb.codes[0].len(), 3);
    }

    #[test]
    fn training_is_reproducible_across_execution_modes() {
        let g = constant_group(20);
        let cfg = quick(EncoderStrategy::PerVisit, 2, 5);
        let a = train(&g, &cfg, "g", "h", Exec::Sequential).unwrap();
        let b = train(&g, &cfg, "g", "h", Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_data_reaches_entropy_floor() {
        let g = constant_group(64);
        let trained = train(&g, &quick(EncoderStrategy::Flattened, 1, 300), "g", "h", Exec::Sequential).unwrap();
        let model = &trained.models[0];
        let code = LatentCode { s: 0, z: vec![0.0] };
        for (c, dist) in model.cell_distributions(&code).iter().enumerate() {
            match dist {
                // Reconstruction error of a constant category goes to zero.
                CellDist::Discrete { probs } => assert!(probs[1] > 0.99, "cell {c}: {probs:?}"),
                // Variance shrinks towards the floor but never below it.
                CellDist::Gaussian { var, .. } => {
                    assert!(*var >= super::super::VAR_FLOOR);
                    assert!(*var < 0.05, "cell {c}: var {var}");
                }
                other => panic!("unexpected {other:?}"),
            }
        }
        let trace = &trained.loss_traces[0];
        assert!(trace.last().unwrap().is_finite());
        assert!(trace.last().unwrap() < &trace[0]);
    }

    #[test]
    fn separated_clusters_are_linearly_separable() {
        // Two clusters: low/high real values and distinct categories.
        let n = 120;
        let mut values = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..n {
            let high = i % 2 == 1;
            for _ in 0..3 {
                let noise: f64 = StandardNormal.sample(&mut rng);
                values.push(if high { 6.0 } else { -6.0 } + 0.5 * noise);
                values.push(if high { 1.0 } else { 0.0 });
            }
        }
        let g = GroupTensor {
            n,
            n_visits: 3,
            names: vec!["r".into(), "c".into()],
            likelihoods: vec![Likelihood::Real, Likelihood::Categorical { levels: 2 }],
            mask: vec![true; values.len()],
            values,
        };
        for strategy in [EncoderStrategy::Recurrent, EncoderStrategy::Flattened] {
            let trained = train(&g, &quick(strategy, 1, 60), "g", "h", Exec::Sequential).unwrap();
            let emb = encode_dataset(&trained, &g, Exec::Sequential).unwrap();
            let z: Vec<f64> = emb.codes[0].iter().map(|c| c.z[0]).collect();
            let lo_max = z.iter().step_by(2).copied().fold(f64::NEG_INFINITY, f64::max);
            let lo_min = z.iter().step_by(2).copied().fold(f64::INFINITY, f64::min);
            let hi_max = z.iter().skip(1).step_by(2).copied().fold(f64::NEG_INFINITY, f64::max);
            let hi_min = z.iter().skip(1).step_by(2).copied().fold(f64::INFINITY, f64::min);
            assert!(lo_max < hi_min || hi_max < lo_min, "{strategy:?}: clusters overlap");
        }
    }

    #[test]
    fn encoding_is_deterministic_and_permutation_equivariant() {
        let g = constant_group(10);
        let mut g = g;
        for (k, x) in g.values.iter_mut().enumerate() {
            if k % 2 == 1 {
                *x = k as f64 * 0.1;
            }
        }
        let trained = train(&g, &quick(EncoderStrategy::Recurrent, 2, 3), "g", "h", Exec::Sequential).unwrap();
        let a = encode_dataset(&trained, &g, Exec::Sequential).unwrap();
        let b = encode_dataset(&trained, &g, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let perm: Vec<usize> = (0..10).rev().collect();
        let c = encode_dataset(&trained, &g.select(&perm), Exec::Sequential).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(c.codes[0][k], a.codes[0][i]);
        }
    }

    #[test]
    fn decoded_values_respect_domains() {
        let g = GroupTensor {
            n: 2,
            n_visits: 1,
            names: vec!["p".into(), "k".into(), "o".into()],
            likelihoods: vec![
                Likelihood::Positive,
                Likelihood::Count,
                Likelihood::Ordinal { levels: 3 },
            ],
            values: vec![2.0, 3.0, 1.0, 5.0, 0.0, 2.0],
            mask: vec![true; 6],
        };
        let trained = train(&g, &quick(EncoderStrategy::Flattened, 1, 1), "g", "h", Exec::Sequential).unwrap();
        let model = &trained.models[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let code = LatentCode { s: 0, z: vec![-1.5] };
        for _ in 0..100_000 {
            let x = decode_sample(model, &code, DecodeMode::Sample, &mut rng);
            assert!(x[0] > 0.0);
            assert!(x[1] >= 0.0 && x[1].fract() == 0.0);
            assert!([0.0, 1.0, 2.0].contains(&x[2]));
        }
        let m = decode_sample(model, &code, DecodeMode::Mode, &mut rng);
        assert!(m[0] > 0.0 && [0.0, 1.0, 2.0].contains(&m[2]));
    }

    #[test]
    fn real_head_draws_match_mean() {
        let dist = CellDist::Gaussian { mean: 0.7, var: 2.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let mean = (0..n).map(|_| dist.sample(&mut rng)).sum::<f64>() / n as f64;
        let se = (2.0 / n as f64).sqrt();
        assert!((mean - 0.7).abs() < 3.0 * se);
    }

    #[test]
    fn degenerate_categorical_always_first_level() {
        let dist = CellDist::Discrete { probs: vec![1.0, 0.0, 0.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!((0..10_000).all(|_| dist.sample(&mut rng) == 0.0));
        assert_eq!(dist.mode(), 0.0);
    }

    #[test]
    fn checkpoint_round_trip_and_schema_check() {
        let g = constant_group(4);
        let trained = train(&g, &quick(EncoderStrategy::Recurrent, 1, 1), "g", "abc", Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        trained.save(&path).unwrap();
        assert_eq!(TrainedModel::load(&path, "abc").unwrap(), trained);
        assert!(matches!(
            TrainedModel::load(&path, "other"),
            Err(Error::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn elbo_parts_and_masking() {
        let g = constant_group(3);
        let trained = train(&g, &quick(EncoderStrategy::Recurrent, 2, 1), "g", "h", Exec::Sequential).unwrap();
        let model = &trained.models[0];
        let (norm, _) = normalize(&g);
        let mut ws = Workspace::new(&model.arch);
        let (x, m) = norm.row(0);
        let parts = model.loss(&model.params, x, m, &[0.4], None, &mut ws);
        assert!((parts.total - (parts.kl_z - parts.recon + parts.kl_s)).abs() < 1e-10);
        let none = vec![false; m.len()];
        let parts = model.loss(&model.params, x, &none, &[0.4], None, &mut ws);
        assert_eq!(parts.recon, 0.0);
    }

    #[test]
    fn posterior_equal_to_prior_has_zero_kl() {
        let g = constant_group(2);
        let trained = train(&g, &quick(EncoderStrategy::Flattened, 1, 1), "g", "h", Exec::Sequential).unwrap();
        let mut model = trained.models[0].clone();
        let a = model.arch.clone();
        model.params[a.mu_w.range()].fill(0.0);
        model.params[a.lv_w.range()].fill(0.0);
        model.params[a.lv_b.range()].fill(0.0);
        let prior = model.params[a.prior_mu.off];
        model.params[a.mu_b.off] = prior;
        let (norm, _) = normalize(&g);
        let (x, m) = norm.row(0);
        let mut ws = Workspace::new(&model.arch);
        let parts = model.loss(&model.params, x, m, &[0.0], None, &mut ws);
        assert_eq!(parts.kl_z, 0.0);
        assert_eq!(parts.kl_s, 0.0);
    }
}
