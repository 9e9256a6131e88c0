use std::path::PathBuf;

use numcore::TensorError;
use thiserror::Error;

use crate::stylebank::BankError;
use crate::cli::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("non-finite loss {loss} at step {step} (lr {lr}, momentum {momentum})")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        lr: f64,
        momentum: f64,
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

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
