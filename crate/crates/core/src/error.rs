use thiserror::Error;

/// Errors raised anywhere in the modelling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {diff:e}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("insufficient data for virus {virus}: {reason}")]
    InsufficientData { virus: String, reason: String },

    #[error("logistic regression for virus {virus} diverged after {iterations} iterations (separation)")]
    Separation { virus: String, iterations: usize },

    #[error("no episodes tested for virus {virus} in month {month}")]
    EmptyMonth { virus: String, month: usize },

    #[error("initial state has non-finite log posterior ({0})")]
    NonFiniteDensity(f64),

    #[error("too few posterior draws: need at least {needed}, have {have}")]
    TooFewDraws { needed: usize, have: usize },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
