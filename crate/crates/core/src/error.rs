use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("empty dimension in {0}")]
    EmptyDimension(&'static str),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("index {index} out of range 0..{len} in {what}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("temporal alignment error: expected {expected} frames, got {actual}")]
    Alignment { expected: usize, actual: usize },
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("frozen backbone modified: fingerprint {before} became {after}")]
    FrozenViolation { before: String, after: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}
