//! Minimal dense reverse-mode automatic differentiation.
//!
//! A [`Graph`] is declared once (inputs, parameter slots, operations) and
//! then evaluated with [`Graph::forward`] on concrete parameters and inputs.
//! Values of every node are cached so [`Graph::backward`] can propagate an
//! output gradient to parameters and to inputs declared differentiable.
//! Binary codewords are fed as differentiable real-valued inputs, which is
//! how gradients with respect to individual bits are obtained.
//!
//! Elementwise work runs in the tensor's own precision; sums, means and
//! `log Σ exp` accumulate in `f64`.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{
    compare_blocks, grad_check, numeric_gradients, relative_error, BlockReport, GradCheckReport,
    FD_STEP,
};
pub use graph::{logsumexp, Gradients, Graph, NodeId, Op, Wrt};
pub use tensor::{Scalar, Tensor};

/// Lower clamp applied to probabilities before any logarithm.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("non-finite gradient at node {node}")]
    NonFiniteGradient { node: usize },
    #[error("backward called before forward")]
    NotEvaluated,
}
