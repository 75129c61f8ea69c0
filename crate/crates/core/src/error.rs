use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TdaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TdaError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// A documented precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite {what} at step {step}: {value}")]
    NonFinite {
        what: &'static str,
        step: usize,
        value: f64,
    },

    /// The detector endpoint could not be reached. Safe to retry.
    #[error("transport error: {0}")]
    Transport(String),

    /// The detector endpoint answered with something we cannot parse.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl TdaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TdaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_retriable(&self) -> bool {
        matches!(self, TdaError::Transport(_))
    }
}
