use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CoralError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoralError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("layout error in {path}: {reason}")]
    Layout { path: PathBuf, reason: String },

    #[error("version mismatch in {path}: {reason}")]
    VersionMismatch { path: PathBuf, reason: String },

    #[error("checksum mismatch for blob {path}")]
    Checksum { path: PathBuf },

    #[error("backbone fingerprint mismatch: artifact expects {expected}, backbone is {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: u64, detail: String },

    #[error("component failure: {0}")]
    Component(String),

    #[error("image encoding failed: {0}")]
    Encode(String),
}

impl CoralError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoralError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn layout(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CoralError::Layout {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
