use std::io;

use thiserror::Error;

/// Errors raised anywhere in the engine.
///
/// The variants split along the exit-code boundary used by the CLI:
/// [`Error::Config`], [`Error::Usage`] and [`Error::Schema`] are caller
/// mistakes (exit code 2), everything else is a runtime failure (exit code 1).
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("divergence is infinite: {0}")]
    DivergenceInfinite(String),

    #[error("backend lacks capability: {0}")]
    Capability(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// `true` for errors caused by invalid configuration, flags or input files.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Error::Usage(_) | Error::Config(_) | Error::Schema { .. }
        )
    }

    /// Process exit code: 2 for configuration/schema problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.is_configuration() {
            2
        } else {
            1
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
