//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape precondition violated by an operation; names both offending shapes.
    #[error("dimension error in {op}: lhs shape {lhs:?}, rhs shape {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },

    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values, overflow guards, aborted training steps.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Tape misuse: double backward, detached loss, non-scalar loss.
    #[error("tape error: {0}")]
    Tape(String),

    /// Dataset / vocabulary / tokenization problems.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed on-disk records (DTNS tensors, checkpoints, manifests).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
