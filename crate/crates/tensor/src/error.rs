use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("shape {shape:?} needs {expected} elements, got {got}")]
    BadLength { shape: Vec<usize>, expected: usize, got: usize },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable does not belong to this tape")]
    NotOnTape,

    #[error("{op}: axis {axis} is empty or out of range for shape {shape:?}")]
    EmptyAxis { op: &'static str, axis: usize, shape: Vec<usize> },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
