use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {len} classes")]
    OutOfRange { index: usize, len: usize },

    #[error("degenerate posterior: {0}")]
    DegeneratePosterior(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("{}:{line}:{column}: {message}", path.display())]
    Format {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by bad input rather than by the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::OutOfRange { .. }
                | Error::Validation(_)
                | Error::Format { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
