use thiserror::Error;
use wm_offload::OffloadError;
use wm_tensor::TensorError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("invalid plan: {0}")]
    Plan(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("training step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Offload(#[from] OffloadError),
}

impl CoreError {
    /// Short machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            CoreError::Config(_) => "config",
            CoreError::Shape(_) => "shape",
            CoreError::NonFinite(_) => "numeric",
            CoreError::Plan(_) => "plan",
            CoreError::Data(_) => "data",
            CoreError::Format(_) => "format",
            CoreError::Training { .. } => "training",
            CoreError::Io(_) => "io",
            CoreError::Tensor(TensorError::Io(_)) => "io",
            CoreError::Tensor(TensorError::Format(_)) => "format",
            CoreError::Tensor(TensorError::External(e)) => {
                match e.downcast_ref::<CoreError>() {
                    Some(inner) => inner.category(),
                    None if e.is::<OffloadError>() => "offload",
                    None => "tensor",
                }
            }
            CoreError::Tensor(_) => "tensor",
            CoreError::Offload(OffloadError::Budget { .. } | OffloadError::BudgetExceeded { .. }) => {
                "budget"
            }
            CoreError::Offload(_) => "offload",
        }
    }
}

impl From<CoreError> for TensorError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Tensor(t) => t,
            other => TensorError::External(Box::new(other)),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn config(msg: impl Into<String>) -> CoreError {
    CoreError::Config(msg.into())
}
