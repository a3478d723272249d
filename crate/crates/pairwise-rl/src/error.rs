//! Crate-wide error type.
//!
//! Low-level tensor operations panic on shape mismatch (programmer error);
//! everything a caller can trigger with bad data or bad config returns
//! [`Error`]. The CLI maps variants to distinct exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or layer received an input of the wrong shape.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    /// A documented precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric failure: NaN/Inf where finite values are required, or a
    /// diverging training run.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Config value violates a documented constraint.
    #[error("config error: {0}")]
    Config(String),

    /// Config text is not valid TOML.
    #[error("config syntax error: {0}")]
    ConfigSyntax(String),

    /// Config contains a key this tool does not define.
    #[error("config unknown key: {0}")]
    ConfigUnknownKey(String),

    /// A pipeline stage was asked to run before its inputs exist.
    #[error("missing input: {0}")]
    MissingInput(String),

    /// An artifact on disk does not match the hash recorded in the manifest.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// An exhaustive search was requested over a space that is too large.
    #[error("search space too large: {0}")]
    TooLarge(String),

    /// A file has a malformed or unsupported header/record.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Exit code for the CLI: stable per category so scripts can branch.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigSyntax(_) | Error::ConfigUnknownKey(_) => 2,
            Error::MissingInput(_) => 3,
            Error::Integrity(_) => 4,
            Error::Numeric(_) => 5,
            _ => 1,
        }
    }
}
