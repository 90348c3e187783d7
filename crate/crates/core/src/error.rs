use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("empty array rejected ({rows}x{cols})")]
    Empty { rows: usize, cols: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("gradient requested of a non-scalar node with shape {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("node {0} is not on this tape")]
    UnknownNode(usize),

    #[error("node {0} is already registered as a parameter")]
    DuplicateParameter(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("optimizer state is not initialized for these parameters")]
    OptimizerUninitialized,

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
