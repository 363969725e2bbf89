//! Error types shared across the toolkit.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by dataset loading, attacks, training, and evaluation.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration (unknown ids, malformed files, incompatible options).
    Config(String),
    /// A caller violated an operation precondition.
    Argument(String),
    /// Dataset files missing or unreadable.
    Load(String),
    /// Non-finite values where finite ones are required. Carries the sample
    /// or head index when known.
    Numeric { context: String, index: Option<usize> },
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Training aborted because the loss became non-finite.
    Diverged { epoch: usize, step: usize },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn load(msg: impl Into<String>) -> Self {
        Error::Load(msg.into())
    }

    pub fn numeric(context: impl Into<String>, index: Option<usize>) -> Self {
        Error::Numeric {
            context: context.into(),
            index,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Argument(msg) => write!(f, "argument error: {msg}"),
            Error::Load(msg) => write!(f, "load error: {msg}"),
            Error::Numeric { context, index } => match index {
                Some(i) => write!(f, "numeric error: {context} (index {i})"),
                None => write!(f, "numeric error: {context}"),
            },
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Diverged { epoch, step } => {
                write!(f, "training diverged at epoch {epoch}, step {step}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
