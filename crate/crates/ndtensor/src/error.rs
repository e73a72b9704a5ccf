use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid geometry ({detail})")]
    Geometry { op: &'static str, detail: String },

    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: empty reduction ({detail})")]
    EmptyReduction { op: &'static str, detail: String },

    #[error("backward root must hold a single element, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward called on a tape with no recorded operations")]
    EmptyTape,

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn geometry(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Geometry {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Domain {
            op,
            detail: detail.into(),
        }
    }
}
