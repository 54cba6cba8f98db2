//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every primitive as it is evaluated; calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns [`Gradients`] for every node. Graphs are cheap to build and are
//! meant to be thrown away after each training step.

mod check;
mod gemm;
mod graph;
mod tensor;

pub use check::{finite_difference_check, relative_error, FdReport, RELATIVE_FLOOR};
pub use graph::{softmax_row, Gradients, Graph, Segment, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("invalid tensor shape {shape:?}: {reason}")]
    InvalidShape {
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op}: index {index} out of range for extent {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: invalid segments over {rows} rows: {detail}")]
    InvalidSegments {
        op: &'static str,
        rows: usize,
        detail: String,
    },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
}
