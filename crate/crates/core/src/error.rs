use thiserror::Error;

/// Errors produced by the trajectory-guidance engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Input failed a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),
    /// The selected backend cannot provide a requested capability.
    #[error("backend capability missing: {0}")]
    Capability(String),
    /// Shapes of two arrays that must agree do not.
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    /// Invariant violated inside the engine; indicates a bug.
    #[error("internal error: {0}")]
    Internal(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
