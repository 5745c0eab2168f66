use memlab_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{what} {index} out of range (limit {limit})")]
    OutOfRange { what: &'static str, index: usize, limit: usize },

    #[error("context overflow: {needed} tokens exceed max_context {max}")]
    ContextOverflow { needed: usize, max: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("data stream exhausted at step {0}")]
    StreamExhausted(usize),

    #[error("overlapping injections at step {0}")]
    OverlappingInjection(usize),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("analysis undefined: {0}")]
    Analysis(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
