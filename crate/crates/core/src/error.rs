//! Crate-wide error type and result alias.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor math, quantizers, the bitwise engine and the
/// training harness.
#[derive(Debug)]
pub enum Error {
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A caller violated an API contract (non-scalar loss, missing backward
    /// function, code overflow, invalid parameter vector, ...).
    Contract(String),
    /// Input is degenerate for the requested statistic (all-zero weights,
    /// empty dataset, ...).
    DegenerateInput(String),
    /// A persisted file does not match its format specification.
    Format { offset: u64, message: String },
    /// Configuration or command-line text could not be parsed.
    Parse(String),
    /// Training produced a non-finite loss or gradient.
    Divergence { epoch: usize, step: usize, detail: String },
    /// I/O failure while reading or writing an artifact.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            Self::Contract(msg) => write!(f, "contract violation: {msg}"),
            Self::DegenerateInput(msg) => write!(f, "degenerate input: {msg}"),
            Self::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            Self::Parse(msg) => write!(f, "parse error: {msg}"),
            Self::Divergence { epoch, step, detail } => {
                write!(f, "training diverged at epoch {epoch}, step {step}: {detail}")
            }
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Self::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
