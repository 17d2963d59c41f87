use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not agree.
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An axis or index is out of bounds.
    Range {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// A precondition of the call was violated.
    Contract(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, left, right } => {
                write!(f, "{op}: dimension mismatch between {left:?} and {right:?}")
            }
            Error::Range { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (bound {bound})")
            }
            Error::Contract(msg) => write!(f, "contract violated: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
