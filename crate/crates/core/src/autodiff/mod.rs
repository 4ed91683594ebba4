//! Dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape of op records over row-major tensors. Forward ops
//! validate shapes, compute values eagerly, and record a backward rule when
//! any input requires gradients. [`Graph::backward`] walks the tape once in
//! reverse; calling it a second time on the same graph is rejected, so
//! gradient accumulation is always explicit at the call site.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;


pub use gradcheck::{gradient_check, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("data length {len} does not match shape {shape:?} (numel {numel})")]
    BadLength { len: usize, shape: Vec<usize>, numel: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward was already run on this graph; rebuild the graph to differentiate again")]
    BackwardSpent,
    #[error("loss does not depend on any tensor with requires_grad")]
    NoGradPath,
    #[error("{op}: invalid argument: {detail}")]
    InvalidArg { op: &'static str, detail: String },
}
