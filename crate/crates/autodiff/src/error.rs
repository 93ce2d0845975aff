use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("loss does not depend on any gradient-carrying leaf")]
    DisconnectedLoss,

    #[error("cross-entropy mask selects no positions")]
    EmptyMask,

    #[error("index {index} out of range for length {len} in {op}")]
    OutOfRange { op: &'static str, index: usize, len: usize },

    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
