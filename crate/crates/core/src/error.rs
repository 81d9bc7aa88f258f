use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer `{layer}`: {reason}")]
    Layer { layer: String, reason: String },

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("corrupt cache: {0}")]
    CorruptCache(String),

    #[error("corrupt adapter file: {0}")]
    CorruptAdapter(String),

    #[error("version mismatch: found `{found}`, expected `{expected}`")]
    Version { found: String, expected: String },

    #[error("incompatible backbone: {0}")]
    IncompatibleBackbone(String),

    #[error("stale forward pass: {0}")]
    StaleForward(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("oracle refused: {0}")]
    OracleRefused(String),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
