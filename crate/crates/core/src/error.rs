use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the synthesis pipeline.
#[derive(Debug, Error)]
pub enum FlipError {
    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("row {row}, column '{column}': unknown category '{value}'")]
    UnknownCategory {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}, column '{column}': '{value}' is not a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}, column '{column}': missing value")]
    MissingCell { row: usize, column: String },

    #[error("header mismatch: expected {expected:?}, found {found:?}")]
    HeaderMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },

    #[error(
        "numerical feature '{0}' has zero spread; remove it or declare it categorical"
    )]
    ConstantFeature(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("degenerate representation: {0}")]
    Degenerate(String),

    #[error("group {0} is absent from the batch")]
    MissingGroup(usize),

    #[error("privacy: {0}")]
    Privacy(String),

    #[error("privacy budget exceeded: spent epsilon {spent} > target {target}")]
    BudgetExceeded { spent: f64, target: f64 },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl FlipError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlipError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FlipError>;
