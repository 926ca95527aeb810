use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("neighborhood of point {0} has no neighbor with positive weight")]
    DegenerateRow(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step} (learning rate {lr}, gradient norm {grad_norm})")]
    NonFiniteLoss { step: u64, lr: f64, grad_norm: f64 },
    #[error(transparent)]
    Core(#[from] cbct_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
