//! Synthetic data generation for longitudinal, heterogeneous, incomplete
//! cohort data.
//!
//! Variable groups are embedded by heterogeneous-incomplete variational
//! autoencoders (one per visit, or one per group with a flattened or
//! recurrent encoder), a conditional Gaussian Bayesian network models the
//! embeddings together with visit-attendance indicators and covariates, and
//! synthetic participants are drawn from the network and decoded. The
//! evaluation module compares real and synthetic cohorts on marginal
//! distributions, correlation structure, exact dependencies and mixed-model
//! trend analyses.

pub mod bn;
pub mod data;
pub mod eval;
pub mod error;
pub mod hivae;
pub mod par;
pub mod pipeline;
pub mod schema;
pub mod seed;
pub mod surrogate;

pub use error::{Error, ErrorKind, Result};
pub use par::Exec;
