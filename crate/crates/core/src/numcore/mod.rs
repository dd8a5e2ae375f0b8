//! Dense `f64` arrays with a tape for reverse-mode gradients.
//!
//! The op set is the minimum the recommender needs: products, broadcasts,
//! row gathers, per-segment softmax and weighted sums (graph attention),
//! pointwise nonlinearities and a clamped log for the loss. Sums always run
//! in ascending index order, so a forward/backward pass is bit-reproducible.

mod array;
mod gradcheck;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck, REL_ERROR_FLOOR};
pub use tape::{Gradients, Segments, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: input shape {shape:?} does not match segment layout with {rows} rows")]
    SegmentShape {
        op: &'static str,
        shape: (usize, usize),
        rows: usize,
    },
    #[error("segment ids must be sorted and < {num_segments}: row {row} has id {id}")]
    BadSegments { row: usize, id: usize, num_segments: usize },
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("{op}: needs at least one input")]
    EmptyInput { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a 1x1 loss, got shape {shape:?}")]
    NotScalar { shape: (usize, usize) },
}
