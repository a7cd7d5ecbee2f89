//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong in this crate.
///
/// The variants are grouped by how callers should react: `Config` means the
/// caller asked for something inconsistent, `Dim`/`Data`/`Schema`/`Io` mean
/// the inputs are bad, and `Numerical` means the linear algebra gave up.
#[derive(Debug, Error)]
pub enum MogpError {
    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },
}

impl MogpError {
    /// Attach context to an error message, keeping the variant.
    pub fn with_context(self, ctx: &str) -> MogpError {
        match self {
            MogpError::Dim(m) => MogpError::Dim(format!("{ctx}: {m}")),
            MogpError::Config(m) => MogpError::Config(format!("{ctx}: {m}")),
            MogpError::Data(m) => MogpError::Data(format!("{ctx}: {m}")),
            MogpError::Numerical(m) => MogpError::Numerical(format!("{ctx}: {m}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, MogpError>;
