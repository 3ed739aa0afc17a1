use thiserror::Error;

use crate::types::{FeatureKind, Violation};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("required feature `{0}` is missing")]
    FeatureMissing(FeatureKind),

    /// The nonconformity function cannot be evaluated for the requested label
    /// given what was fitted (e.g. the label has no training points).
    #[error("calibration domain error: {0}")]
    CalibrationDomain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dataset failed validation ({} violation(s)); first: {}", .0.len(), .0.first().map(ToString::to_string).unwrap_or_default())]
    Validation(Vec<Violation>),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("artifact format error: {0}")]
    Format(String),

    #[error("unsupported artifact version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("training failed: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
