use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// One axis of a tensor has the wrong length.
    #[error("{context}: axis {axis} has length {got}, expected {expected}")]
    Dim {
        context: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },
    /// Two shapes that must agree do not.
    #[error("{context}: shape {lhs:?} is incompatible with {rhs:?}")]
    Shape {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("batch-norm epsilon must be > 0, got {0}")]
    Epsilon(f64),
    #[error("value {value} is not a multiple of 1/{levels}")]
    NotQuantized { value: f64, levels: u32 },
    #[error("non-binary spike value {0}")]
    NonBinary(f64),
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("operation counting is only defined in inference mode")]
    TrainModeCount,
    #[error("malformed tensor container: {0}")]
    Format(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}
