//! Error type shared across the crate.
//!
//! Variants map onto the CLI exit codes: anything that boils down to a bad
//! input or config exits 2, numerical failures exit 3, plain I/O exits 1.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A value passed to an API was out of its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Buffer sizes or image dimensions disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Config file or config struct failed validation.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed file contents (manifest, PFM, PLY, ...).
    #[error("parse error: {0}")]
    Parse(String),

    /// Non-finite values or a computation that cannot proceed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::DimensionMismatch(_)
            | Error::Config(_)
            | Error::Parse(_) => 2,
            Error::Numerical(_) => 3,
            Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
