use ndtensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, DarnError>;

#[derive(Debug, Error)]
pub enum DarnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: u64 },

    #[error("incomplete corruption grid: {0}")]
    IncompleteGrid(String),

    #[error("unknown corruption `{0}`")]
    UnknownCorruption(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DarnError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        DarnError::Config(msg.into())
    }
}
