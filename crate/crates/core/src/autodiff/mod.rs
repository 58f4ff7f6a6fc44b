//! Dense tensors, a reverse-mode tape, and the Adam optimizer.
//!
//! The tape records eagerly: every op on a [`Graph`] computes its value when
//! called and remembers enough to run the chain rule later. Parameters enter
//! the tape as leaves; tensors that do not require grad enter as constants
//! and never receive gradient, which is how frozen models are kept frozen.

mod adam;
mod check;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use check::{central_difference, finite_diff_check};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Real, Tensor};

pub(crate) use tensor::fnv_step;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} has a zero extent")]
    ZeroExtent { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: inner dimensions disagree ({left} != {right})")]
    InnerMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("concatenation of zero tensors")]
    EmptyConcat,
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("graph already consumed by a backward pass; record a new one")]
    GraphConsumed,
    #[error("tensor does not track gradients")]
    NoGradSlot,
    #[error("non-finite value {value} at index {index} in {what}")]
    NonFinite {
        what: String,
        index: usize,
        value: f64,
    },
    #[error("parameter {index} has no gradient")]
    MissingGrad { index: usize },
    #[error("optimizer state for parameter {index} has shape {state:?}, parameter has {param:?}")]
    StateShape {
        index: usize,
        state: Vec<usize>,
        param: Vec<usize>,
    },
}
