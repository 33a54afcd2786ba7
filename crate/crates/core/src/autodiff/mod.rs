//! Minimal reverse-mode automatic differentiation over `f64` tensors.

mod compose;
pub mod gradcheck;
pub mod program;
mod tape;
mod tensor;

pub use gradcheck::{compare_gradients, grad_check, numeric_gradient, GradComparison};
pub use program::{backward_eval, forward_eval, Program, ProgramNode};
pub use tape::{Gradients, Primitive, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tape::{dot, norm};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("unknown primitive `{op}` at node {node}")]
    UnknownPrimitive { node: String, op: String },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value at {node}")]
    NonFinite { node: String },
    #[error("unbound input `{name}`")]
    UnboundInput { name: String },
    #[error("graph contains a cycle through `{node}`")]
    Cycle { node: String },
    #[error("stop-gradient replay mismatch: {detail}")]
    ReplayMismatch { detail: String },
    #[error("{detail}")]
    InvalidArgument { detail: String },
}
