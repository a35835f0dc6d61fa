use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ChaiError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ChaiError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("attention mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("insufficient trace: {0}")]
    InsufficientTrace(String),

    #[error("profile error: {0}")]
    Profile(String),

    #[error("bad magic bytes in weight file (expected CHAIWGT1, found {found:?})")]
    BadMagic { found: Vec<u8> },

    #[error("truncated weight file: {0}")]
    Truncated(String),

    #[error("weight header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ChaiError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ChaiError::Io {
            path: path.into(),
            source,
        }
    }
}
