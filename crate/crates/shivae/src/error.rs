//! Crate-wide error type.
//!
//! Errors are grouped by the exit code the CLI maps them to: config (2),
//! data (3) and numeric (4). I/O failures are wrapped into the group of
//! the artifact being touched at the call site.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ShivaeError>;

#[derive(Debug, Error)]
pub enum ShivaeError {
    /// Invalid configuration, schema or checkpoint contents.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent data (CSV contents, masks, values).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values encountered during numeric computation.
    #[error("numeric fault: {0}")]
    Numeric(String),
}

impl ShivaeError {
    pub fn config(msg: impl Into<String>) -> Self {
        ShivaeError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        ShivaeError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        ShivaeError::Numeric(msg.into())
    }

    /// Exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            ShivaeError::Config(_) => 2,
            ShivaeError::Data(_) => 3,
            ShivaeError::Numeric(_) => 4,
        }
    }
}
