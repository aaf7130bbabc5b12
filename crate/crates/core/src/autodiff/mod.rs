//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! tensors, plus Adam and a checkpoint container.
//!
//! Every op checks shapes explicitly; there is no implicit broadcasting.
//! Row-wise bias and gain use the dedicated [`Graph::add_row`] and
//! [`Graph::mul_row`] ops.

mod checkpoint;
mod graph;
mod optim;
mod tensor;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("{0} needs at least one input")]
    EmptyInput(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
