use maskdistill_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {id} out of range (max {max})")]
    TokenOutOfRange { id: usize, max: usize },

    #[error("state space of {size} entries exceeds the enumeration limit {limit}; use Monte Carlo estimates instead")]
    StateSpaceTooLarge { size: u128, limit: u128 },

    #[error("non-finite {what} at iteration {iter}")]
    NonFinite { what: &'static str, iter: u64 },

    #[error("gradient reached a frozen path: {0}")]
    GradientLeak(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
