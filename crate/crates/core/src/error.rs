//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not line up for the attempted operation.
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A value violates an operation's preconditions.
    Input(String),
    /// An API was called in a state it does not support.
    Usage(String),
    /// Training produced a non-finite value.
    Numeric {
        epoch: usize,
        stage: Option<usize>,
        what: String,
    },
    /// A metrics aggregation is missing required records.
    IncompleteMetrics(String),
    /// Malformed config, metrics, or checkpoint content.
    Parse(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, left, right } => {
                write!(f, "{op}: dimension mismatch {left:?} vs {right:?}")
            }
            Error::Input(msg) => write!(f, "invalid input: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Numeric { epoch, stage, what } => match stage {
                Some(k) => write!(f, "non-finite {what} at epoch {epoch}, stage {k}"),
                None => write!(f, "non-finite {what} at epoch {epoch}"),
            },
            Error::IncompleteMetrics(msg) => write!(f, "incomplete metrics: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    pub fn dimension(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}
