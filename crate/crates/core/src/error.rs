use thiserror::Error;

/// Errors raised by model construction, inference and file handling.
#[derive(Debug, Error)]
pub enum SpldaError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("{what} is not positive definite")]
    NotPositiveDefinite { what: &'static str },

    #[error("{what} is singular (condition number estimate {condition:.3e})")]
    Singular { what: &'static str, condition: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate state: {0}")]
    Degenerate(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SpldaError>;

pub(crate) fn shape_err(context: &'static str, expected: impl ToString, got: impl ToString) -> SpldaError {
    SpldaError::Shape {
        context,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
