//! Dense `f64` arrays, extended-real softmax, and a define-by-run reverse-mode
//! differentiation graph.
//!
//! Everything downstream (losses, the toy language model, gradient analysis)
//! is built on the [`Graph`] defined here. Graphs are rebuilt for every
//! forward pass; a [`Var`] is only meaningful for the graph that created it.

mod array;
mod gemm;
mod gradcheck;
mod graph;
mod softmax;

pub use array::DenseArray;
pub use gradcheck::{finite_diff_check, FD_STEP};
pub use graph::{Gradients, Graph, Var};
pub use softmax::{log_softmax_ext, log_sum_exp_ext, softmax_ext};

pub(crate) use gemm::gemm;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("operand shapes {left:?} and {right:?} are incompatible for {op}")]
    IncompatibleShapes {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("softmax over an empty vector")]
    EmptyInput,
    #[error("every logit is -inf; no probability mass remains")]
    DegenerateDistribution,
    #[error("{count} logits are +inf; the one-hot limit is ambiguous")]
    AmbiguousOneHot { count: usize },
    #[error("NaN encountered in {0}")]
    NotANumber(&'static str),
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}
