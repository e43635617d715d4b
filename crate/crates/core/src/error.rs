use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or feature shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An input violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),
    /// A non-finite value appeared where a finite one was required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// Synthetic data generation gave up after its retry budget.
    #[error("generation error: {0}")]
    Generation(String),
    /// A metric is undefined on the given input (e.g. no nonempty pairs).
    #[error("undefined: {0}")]
    Undefined(String),
    /// A checkpoint file is malformed or does not match the expected model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Config(_) | Error::Dimension(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
