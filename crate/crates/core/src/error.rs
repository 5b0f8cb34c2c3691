//! Error type shared across the crate.
//!
//! Every fallible operation returns [`Result`]. The variants map onto the
//! process exit codes used by the CLI: usage problems (bad files, bad flags)
//! exit 2, contract violations (shape mismatches, invariant breaks) exit 3,
//! numerical failures (non-finite values, divergence) exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors or configured sizes.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A documented precondition or invariant was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values, failed convergence, or other numeric breakdown.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed input files or serialized data.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dim(_) | Error::Contract(_) => 3,
            Error::Numerical(_) => 4,
            Error::Format(_) | Error::Io(_) => 2,
        }
    }

    /// Short machine-parsable category tag used as the CLI error prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dim(_) => "dim",
            Error::Contract(_) => "contract",
            Error::Numerical(_) => "numerical",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}
