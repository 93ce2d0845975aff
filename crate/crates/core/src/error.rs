use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] finegrain_autodiff::Error),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("cannot parse bounding box from {0:?}")]
    BboxParse(String),

    #[error("length mismatch: {0} predictions vs {1} references")]
    LengthMismatch(usize, usize),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("{what} of {got} exceeds the limit {limit}")]
    TooLong {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    #[error("{dim} {value} not divisible by {by}")]
    NotDivisible {
        dim: &'static str,
        value: usize,
        by: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
