use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code classes:
/// usage errors are handled by the argument parser, everything that fails
/// while reading or validating inputs is a parse/validation error, and
/// non-finite arithmetic surfaces as a numeric error.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure at step {step}: {msg}")]
    Numeric { step: u64, msg: String },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("unsupported format version in {path}: expected {expected:?}, found {found:?}")]
    Version {
        path: String,
        expected: &'static str,
        found: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
