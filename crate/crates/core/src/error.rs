use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the rerandomization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Factorization met a non-positive (or negligible) pivot at covariate `index`.
    #[error("covariance matrix is rank deficient at covariate {index} (pivot {pivot:e})")]
    RankDeficient { index: usize, pivot: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("acceptance probability underflow: F({upper:e}) = {mass:e}")]
    Underflow { upper: f64, mass: f64 },

    #[error("infeasible budget: S = {total} < K * floor = {groups} * {floor}")]
    InfeasibleBudget { total: u64, groups: usize, floor: u64 },

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("column '{0}' has no observed values")]
    AllMissingColumn(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
