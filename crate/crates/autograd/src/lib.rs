//! Dense row-major tensors and a tape-based reverse-mode differentiator with
//! the operations needed by a small causal transformer.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

use thiserror::Error;

pub use tape::{softmax_nll, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AutogradError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("buffer of length {len} does not fit shape {shape:?}")]
    BufferLength { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range for size {bound}")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already differentiated")]
    TapeConsumed,
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
    #[error("softmax row {row} has no finite entry")]
    EmptyRow { row: usize },
}

pub type Tape64 = Tape<f64>;
pub type Tensor64 = Tensor<f64>;
