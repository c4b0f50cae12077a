use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violates an operation's preconditions.
    #[error("domain error: {0}")]
    Domain(String),

    /// An input file could not be parsed. `line` is 1-based.
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    /// A numerical procedure failed (factorization, non-finite target).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
