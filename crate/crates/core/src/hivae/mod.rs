//! Heterogeneous-incomplete variational autoencoder for one variable group.
//!
//! A group tensor holds `participants x visits x variables` cells with an
//! observedness mask. Three encoder strategies are supported:
//!
//! * [`EncoderStrategy::PerVisit`]: one model per visit, a feedforward
//!   encoder over that visit's cells;
//! * [`EncoderStrategy::Flattened`]: one model for all visits, a feedforward
//!   encoder over the concatenated visits;
//! * [`EncoderStrategy::Recurrent`]: one model for all visits, an LSTM runs
//!   over the visit sequence and its final output feeds the recognition model.
//!
//! The latent code is a mixture component `s` with a Gaussian `z` per
//! component. The decoder maps `z` to an intermediate vector `Y` with
//! `y_dim` entries per visit, and one likelihood head per (variable, visit)
//! reads its visit's slice of `Y` together with `s`.

mod likelihood;
mod model;
pub mod normalize;
pub mod params;
mod train;

use serde::{Deserialize, Serialize};

pub use likelihood::{CellDist, Head, VAR_FLOOR};
pub use model::{Architecture, EncoderSlots, HivaeModel, LossParts, Posterior};
pub use normalize::{normalize, CellTransform, NormalizationStats};
pub use train::{decode_sample, encode_dataset, train, DecodeMode, Embeddings, TrainedModel};

use crate::data::WideMatrix;
use crate::error::{Error, Result};
use crate::schema::{CohortSchema, Group, Likelihood};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EncoderStrategy {
    PerVisit,
    Flattened,
    Recurrent,
}

impl EncoderStrategy {
    pub fn per_visit(&self) -> bool {
        matches!(self, EncoderStrategy::PerVisit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HivaeConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub y_dim: usize,
    pub s_dim: usize,
    /// Width of the LSTM output, and of the hidden layer of feedforward encoders.
    pub lstm_dim: usize,
    pub z_dim: usize,
    pub epochs: usize,
    pub encoder_strategy: EncoderStrategy,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for HivaeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 127,
            y_dim: 1,
            s_dim: 1,
            lstm_dim: 20,
            z_dim: 1,
            epochs: 500,
            encoder_strategy: EncoderStrategy::Recurrent,
            seed: 0,
            clip_norm: 10.0,
        }
    }
}

impl HivaeConfig {
    /// Mixture components per group: one for times and nutrition, two for
    /// anthropometric and socioeconomic modules.
    pub fn default_s_dim(group: Group) -> usize {
        match group {
            Group::Anthropometric | Group::Socioeconomic => 2,
            _ => 1,
        }
    }

    pub fn for_group(group: Group, strategy: EncoderStrategy, seed: u64) -> Self {
        Self {
            s_dim: Self::default_s_dim(group),
            encoder_strategy: strategy,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.y_dim == 0 || self.s_dim == 0 || self.lstm_dim == 0 || self.z_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("autoencoder dimensions and batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// `participants x visits x variables` cells of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTensor {
    pub n: usize,
    pub n_visits: usize,
    pub names: Vec<String>,
    pub likelihoods: Vec<Likelihood>,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl GroupTensor {
    pub fn n_vars(&self) -> usize {
        self.names.len()
    }

    #[inline]
    pub fn index(&self, i: usize, t: usize, j: usize) -> usize {
        (i * self.n_visits + t) * self.n_vars() + j
    }

    #[inline]
    pub fn value(&self, i: usize, t: usize, j: usize) -> f64 {
        self.values[self.index(i, t, j)]
    }

    #[inline]
    pub fn observed(&self, i: usize, t: usize, j: usize) -> bool {
        self.mask[self.index(i, t, j)]
    }

    /// Cells of participant `i` (visit-major).
    pub fn row(&self, i: usize) -> (&[f64], &[bool]) {
        let w = self.n_visits * self.n_vars();
        (&self.values[i * w..(i + 1) * w], &self.mask[i * w..(i + 1) * w])
    }

    pub fn has_observation(&self, i: usize) -> bool {
        self.row(i).1.iter().any(|&m| m)
    }

    /// Extracts the longitudinal variables `members` (schema indices) for all visits.
    pub fn from_wide(wide: &WideMatrix, schema: &CohortSchema, members: &[usize]) -> Self {
        let v = schema.n_visits;
        let d = members.len();
        let mut values = vec![0.0; wide.n_rows * v * d];
        let mut mask = vec![false; wide.n_rows * v * d];
        for i in 0..wide.n_rows {
            for t in 0..v {
                for (k, &j) in members.iter().enumerate() {
                    let idx = (i * v + t) * d + k;
                    if let Some(x) = wide.get(i, schema.wide_col(t, j)) {
                        values[idx] = x;
                        mask[idx] = true;
                    }
                }
            }
        }
        Self {
            n: wide.n_rows,
            n_visits: v,
            names: members.iter().map(|&j| schema.long_var(j).name.clone()).collect(),
            likelihoods: members.iter().map(|&j| schema.long_var(j).likelihood).collect(),
            values,
            mask,
        }
    }

    /// Single-visit tensor for per-visit models.
    pub fn visit_slice(&self, t: usize) -> Self {
        let d = self.n_vars();
        let mut values = Vec::with_capacity(self.n * d);
        let mut mask = Vec::with_capacity(self.n * d);
        for i in 0..self.n {
            let k = self.index(i, t, 0);
            values.extend_from_slice(&self.values[k..k + d]);
            mask.extend_from_slice(&self.mask[k..k + d]);
        }
        Self {
            n: self.n,
            n_visits: 1,
            names: self.names.clone(),
            likelihoods: self.likelihoods.clone(),
            values,
            mask,
        }
    }

    /// Participants `rows`, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let w = self.n_visits * self.n_vars();
        let mut values = Vec::with_capacity(rows.len() * w);
        let mut mask = Vec::with_capacity(rows.len() * w);
        for &i in rows {
            let (v, m) = self.row(i);
            values.extend_from_slice(v);
            mask.extend_from_slice(m);
        }
        Self {
            n: rows.len(),
            n_visits: self.n_visits,
            names: self.names.clone(),
            likelihoods: self.likelihoods.clone(),
            values,
            mask,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.n * self.n_visits * self.n_vars();
        if self.values.len() != expected || self.mask.len() != expected || self.likelihoods.len() != self.n_vars() {
            return Err(Error::Shape(format!(
                "group tensor expects {expected} cells, has {} values and {} mask entries",
                self.values.len(),
                self.mask.len()
            )));
        }
        for (k, (&x, &m)) in self.values.iter().zip(&self.mask).enumerate() {
            if !m {
                continue;
            }
            let lik = self.likelihoods[k % self.n_vars()];
            let ok = match lik {
                Likelihood::Real => x.is_finite(),
                Likelihood::Positive => x.is_finite() && x > 0.0,
                Likelihood::Count => x.is_finite() && x >= 0.0 && x.fract() == 0.0,
                Likelihood::Categorical { levels } | Likelihood::Ordinal { levels } => {
                    x >= 0.0 && x.fract() == 0.0 && (x as usize) < levels
                }
            };
            if !ok {
                return Err(Error::InvalidInput(format!(
                    "value {x} of `{}` is outside its likelihood's support",
                    self.names[k % self.n_vars()]
                )));
            }
        }
        Ok(())
    }
}

/// Per-participant embedding of one group (or one group-visit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    /// Mixture component, 0-based.
    pub s: usize,
    pub z: Vec<f64>,
}
