use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A file does not follow the expected binary or text layout.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Two sources that must agree (e.g. image and label counts) do not.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// A manifest entry could not be turned into an image.
    #[error("ingestion error for entry `{entry}`: {reason}")]
    Ingestion { entry: String, reason: String },

    /// Tensor shapes do not match what an operation requires.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration value, named by its `section.key` path.
    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("normalizer fitting failed: {0}")]
    Fitting(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// An operation was called before its prerequisites were satisfied.
    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFinite { step: u64, breakdown: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Migration { found: u32, expected: u32 },

    #[error("tensor `{name}`: {reason}")]
    Tensor { name: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
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

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
