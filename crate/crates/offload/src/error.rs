use thiserror::Error;
use wm_tensor::TensorError;

#[derive(Debug, Error)]
pub enum OffloadError {
    #[error("activation budget of {budget} bytes is below the {required} bytes one segment needs")]
    Budget { budget: i64, required: i64 },

    #[error("arena high-water mark {high_water} exceeded budget {budget}")]
    BudgetExceeded { budget: i64, high_water: i64 },

    #[error("prefetch lookahead must be at least 1")]
    ZeroLookahead,

    #[error("slot {got} consumed out of order, expected {expected:?}")]
    Order { expected: Option<usize>, got: usize },

    #[error("transfer worker: {0}")]
    Transfer(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<OffloadError> for TensorError {
    fn from(e: OffloadError) -> Self {
        match e {
            OffloadError::Tensor(t) => t,
            other => TensorError::External(Box::new(other)),
        }
    }
}

pub type Result<T> = std::result::Result<T, OffloadError>;
