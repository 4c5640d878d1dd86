//! Dense tensors, a static computation graph with reverse-mode gradients,
//! and a central-difference gradient oracle.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, REL_FLOOR};
pub use graph::{Bindings, Graph, NodeId};
pub use params::{Gradients, Param, ParamSet};
pub use tensor::{Scalar, Tensor};

pub(crate) use graph::softmax_in_place;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op} (node {node}) produced a non-finite value")]
    NonFinite { op: &'static str, node: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph has not been evaluated")]
    NotEvaluated,
    #[error("cross-entropy mask selects no positions")]
    EmptyMask,
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("{0} trainable scalars is too many for a finite-difference sweep")]
    TooManyParams(usize),
}
