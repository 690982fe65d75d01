use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate batch: every position is loss-masked")]
    DegenerateBatch,

    #[error("config error: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds context limit {limit}")]
    Length { len: usize, limit: usize },

    #[error("token id {id} is outside the vocabulary (size {vocab})")]
    Vocab { id: u32, vocab: usize },

    #[error("scene error: {0}")]
    Scene(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("i/o error at {path}: {source}")]
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
        Error::Io { path: path.into(), source }
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
