use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{op}: {msg}")]
    InvalidInput { op: &'static str, msg: String },
    #[error("dataset: {msg} at byte offset {offset}")]
    Dataset { offset: u64, msg: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at step {step} (last report: {last})")]
    NonFiniteLoss { step: u64, last: String },
    #[error("frozen parameter `{0}` changed during linear probing")]
    FreezeViolation(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidInput {
        op,
        msg: msg.into(),
    }
}
