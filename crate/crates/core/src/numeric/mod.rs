//! Tensor arithmetic and reverse-mode differentiation.

pub mod gradcheck;
pub mod kernels;
pub mod rng;
mod tape;
mod tensor;

#[cfg(test)]
mod tests;

pub use rng::Rng;
pub use tape::{AttentionMask, RetainedAttention, Tape, Var, MASK_FILL};
pub use tensor::{DType, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Dimension { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index {index} out of range (bound {bound})")]
    Index { index: usize, bound: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Contract(String),
}
