use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pretraining toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix not positive definite ({what}); condition estimate {condition:e}")]
    Singular { what: String, condition: f64 },

    #[error("schema version mismatch in {path}: found {found}, supported {supported}")]
    SchemaVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("dataset validation failed: {0}")]
    Validation(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("training aborted at epoch {epoch}: {reason}")]
    TrainingAborted {
        epoch: usize,
        reason: String,
        /// Path of the last good checkpoint, when one was written.
        last_good: Option<PathBuf>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Short machine-readable kind, used for one-line CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Shape { .. } => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::Singular { .. } => "singular",
            Error::SchemaVersion { .. } => "schema_version",
            Error::Validation(_) => "validation",
            Error::Format { .. } => "format",
            Error::TrainingAborted { .. } => "training_aborted",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
