use std::path::PathBuf;

/// Errors produced anywhere in the engine or the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every extent must be >= 1")]
    InvalidShape(Vec<usize>),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate batch: channel {channel} has {count} element(s), batch statistics need at least 2")]
    DegenerateBatch { channel: usize, count: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("load error for tensor `{tensor}`: {message}")]
    Load { tensor: String, message: String },

    #[error("balance error: {0}")]
    Balance(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("insufficient slices: volume has {have}, need at least {need}")]
    InsufficientSlices { have: usize, need: usize },

    #[error("degenerate volume: {0}")]
    DegenerateVolume(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
