//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset ingestion, model fitting and clustering.
#[derive(Debug, Error)]
pub enum Error {
    #[error("csv parse error at row {row}, column '{column}': {message}")]
    CsvCell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("csv file error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing required column '{0}'")]
    MissingColumn(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("fold assignment error: {0}")]
    Folds(String),

    #[error("forest fit error: {0}")]
    ForestFit(String),

    #[error("prediction error for test point {index}: {message}")]
    Predict { index: usize, message: String },

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error("kernel error: {0}")]
    Kernel(String),

    #[error("numerics error: {0}")]
    Numerics(String),

    #[error("spectral clustering error: {0}")]
    Spectral(String),

    #[error("zero-degree row {0} in affinity matrix (isolated point)")]
    ZeroDegreeRow(usize),

    #[error("convex clustering did not converge within {iterations} iterations (residual {residual:.3e})")]
    SonNoConvergence { iterations: usize, residual: f64 },

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },
}

pub type Result<T> = std::result::Result<T, Error>;
