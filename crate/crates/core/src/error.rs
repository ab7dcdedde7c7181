use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DrumError>;

#[derive(Debug, Error)]
pub enum DrumError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("invariant violated: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl DrumError {
    /// Short category name, used by the CLI when reporting failures.
    pub fn category(&self) -> &'static str {
        match self {
            DrumError::Io { .. } => "io",
            DrumError::Format(_) => "format",
            DrumError::Truncated { .. } => "truncated",
            DrumError::Invalid(_) => "invalid",
            DrumError::Dimension(_) => "dimension",
            DrumError::Degenerate(_) => "degenerate",
            DrumError::Range(_) => "range",
            DrumError::NonFinite(_) => "non-finite",
            DrumError::Json(_) => "json",
            DrumError::Csv(_) => "csv",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DrumError::Io {
            path: path.into(),
            source,
        }
    }
}
