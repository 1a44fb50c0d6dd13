//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the generation and evaluation pipeline.
///
/// Variants are grouped so the command line can map them onto exit codes:
/// configuration problems, data problems and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("participant {pers_id} has conflicting records for visit {visit}")]
    VisitConflict { pers_id: u64, visit: usize },
    #[error("variable `{0}` has no observed values to impute from")]
    CannotImpute(String),
    #[error("not enough synthetic participants in stratum sex={sex}: need {needed}, have {available}")]
    Shortfall {
        sex: u8,
        needed: usize,
        available: usize,
    },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("schema mismatch: expected hash {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },
    #[error("training diverged at epoch {epoch}, batch {batch} (loss trace has {} entries)", trace.len())]
    Divergence {
        epoch: usize,
        batch: usize,
        trace: Vec<f64>,
    },
    #[error("embedding missing for participant {participant} in node `{node}`")]
    Assembly { participant: u64, node: String },
    #[error("constraint violation: {0}")]
    Constraint(String),
    #[error("model fit failed: {0}")]
    Fit(String),
    #[error("failed to converge: {0}")]
    NonConvergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("toml: {0}")]
    Toml(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error("{context}: {source}")]
    Context { context: String, source: Box<Error> },
}

/// Broad failure category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Context { source, .. } => source.kind(),
            Error::Config(_) | Error::Toml(_) | Error::SchemaMismatch { .. } => ErrorKind::Config,
            Error::Divergence { .. } | Error::Fit(_) | Error::NonConvergence(_) => {
                ErrorKind::Numerical
            }
            _ => ErrorKind::Data,
        }
    }

    /// Prefixes the error with the stage or component it came from.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The error without any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Toml(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Toml(e.to_string())
    }
}
