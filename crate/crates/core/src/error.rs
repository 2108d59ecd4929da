use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid basis specification: {0}")]
    InvalidBasis(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("value {value} outside domain [{lower}, {upper}]")]
    OutOfDomain { value: f64, lower: f64, upper: f64 },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The (conditional) second-moment matrix is numerically singular and no
    /// ridge penalty was requested.
    #[error(
        "identification failure: minimum eigenvalue {min_eigenvalue:.3e} below threshold {threshold:.3e} ({context})"
    )]
    IdentificationFailure {
        min_eigenvalue: f64,
        threshold: f64,
        context: String,
    },

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn is_identification_failure(&self) -> bool {
        matches!(self, Error::IdentificationFailure { .. })
    }
}
