use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch { context: String, expected: String, actual: String },
    #[error("stale cache: forward pass was computed for different parameters or another net")]
    StaleCache,
    #[error("non-finite gradient at step {step} in weight `{name}`")]
    NonFiniteGradient { step: u64, name: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

pub(crate) fn shape_err(context: &str, expected: impl ToString, actual: impl ToString) -> NnError {
    NnError::ShapeMismatch {
        context: context.to_owned(),
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
