use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("could not place exclusion {index} (radius {radius}) after {attempts} attempts")]
    PlacementFailure {
        index: usize,
        radius: f64,
        attempts: usize,
    },

    #[error("no fluid path connects the inlet and the outlet")]
    NonPercolating,

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("linear solve did not reach tolerance: backward error {residual:e} > {tolerance:e}")]
    SolverDivergence { residual: f64, tolerance: f64 },

    #[error("diffusivity must be positive and finite, got {value} in cell {cell}")]
    NonPositiveDiffusivity { cell: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty training dataset")]
    EmptyDataset,

    #[error("state is not trained: {0}")]
    Untrained(String),

    #[error("insufficient training pool: need {needed} samples, have {available}")]
    InsufficientPool { needed: usize, available: usize },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::PlacementFailure { .. } => "PlacementFailure",
            Error::NonPercolating => "NonPercolating",
            Error::SingularSystem(_) => "SingularSystem",
            Error::SolverDivergence { .. } => "SolverDivergence",
            Error::NonPositiveDiffusivity { .. } => "NonPositiveDiffusivity",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::EmptyDataset => "EmptyDataset",
            Error::Untrained(_) => "Untrained",
            Error::InsufficientPool { .. } => "InsufficientPool",
            Error::Format { .. } => "FormatError",
            Error::Io { .. } => "IoError",
            Error::Json { .. } => "JsonError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
