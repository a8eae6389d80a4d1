//! Minimal dense tensors with tape-based reverse-mode differentiation.

mod attention;
mod gradcheck;
mod tape;
mod tensor;

pub(crate) use attention::gaussian;
pub use attention::{attention_block, BlockParams, BoundBlock, LN_EPS};
pub use gradcheck::{finite_diff_check, GradCheckError, GradCheckReport};
pub use tape::{Gradients, Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("ragged rows")]
    Ragged,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("sequence of {len} tokens exceeds context length {ctx_len}")]
    ContextOverflow { len: usize, ctx_len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
