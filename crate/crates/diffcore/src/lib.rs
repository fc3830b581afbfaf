//! Small define-by-run reverse-mode automatic differentiation engine over
//! dense `f64` tensors, with an Adam optimizer and a finite-difference
//! gradient checker.
//!
//! Image tensors use `[C, H, W]` layout. Binary elementwise ops require equal
//! shapes, except that a single-element operand broadcasts.

mod adam;
pub mod gradcheck;
mod graph;
pub mod linalg;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: non-finite output")]
    NonFinite { op: &'static str },
    #[error("gram matrix is not positive definite")]
    DegenerateGram,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T, E = AdError> = std::result::Result<T, E>;
