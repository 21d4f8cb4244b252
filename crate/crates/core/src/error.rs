use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid {context}: field `{field}` {reason}")]
    InvalidSpec {
        context: &'static str,
        field: &'static str,
        reason: String,
    },

    #[error("shape error in {context}: {reason}")]
    Shape { context: &'static str, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite value in `{component}` at iteration {iteration}")]
    NonFinite { component: String, iteration: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("architecture fingerprint mismatch: checkpoint {found} vs model {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error in {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn dataset(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Dataset { path: path.into(), reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
