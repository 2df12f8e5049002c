use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index {index} out of bounds for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("empty loss mask")]
    EmptyMask,

    #[error("empty graph")]
    EmptyGraph,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {msg}")]
    Load {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("statistics: {0}")]
    Stats(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::Load { .. } | Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => 2,
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => 3,
            _ => 3,
        }
    }
}
