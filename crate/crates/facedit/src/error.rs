//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input that makes an operation mathematically undefined
    /// (zero-norm vectors, coincident landmarks, empty sets).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A call that violates a module contract (wrong layer kind,
    /// stage/data mismatch, out-of-range pose or timestep).
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN/Inf where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or missing data files (datasets, checkpoints, reports).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
