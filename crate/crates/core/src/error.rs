use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum UlcError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl UlcError {
    /// Short machine-readable tag used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            UlcError::Config(_) => "config",
            UlcError::Shape(_) => "shape",
            UlcError::Contract(_) => "contract",
            UlcError::InsufficientData(_) => "insufficient_data",
            UlcError::Divergence(_) => "divergence",
            UlcError::UndefinedMetric(_) => "undefined_metric",
            UlcError::Parse { .. } => "parse",
            UlcError::UnknownStrategy { .. } => "unknown_strategy",
            UlcError::Io { .. } => "io",
            UlcError::Serde(_) => "serde",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UlcError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, UlcError>;
