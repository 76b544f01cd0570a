//! Dense tensors, a tape-based reverse-mode differentiation engine over a
//! fixed op set, Adam, and a finite-difference gradient checker.
//!
//! Everything runs in `f64`. A [`Tape`] is a static graph: it is built once
//! from [`Op`] nodes, then evaluated with [`Tape::forward_eval`] against a
//! [`ParameterStore`] and a set of named input tensors. [`Tape::backward`]
//! returns gradients for every trainable parameter the scalar output
//! depends on.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{compare_gradients, finite_diff_check, GradCheckOptions, GradCheckReport};
pub use params::{ParamEntry, ParameterStore};
pub use tape::{Gradients, Inputs, NodeId, NormStats, Op, Tape, NORM_VARIANCE_EPS};
pub use tensor::{
    dot, l2_normalize_rows, log_sum_exp, matmul, matmul_into, matmul_nt_into, matmul_tn_into,
    Tensor, NORM_EPS,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have unequal lengths")]
    RaggedRows,
    #[error("expected a matrix, got shape {0:?}")]
    NotMatrix(Vec<usize>),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("degenerate embedding row {0}")]
    DegenerateRow(usize),
    #[error("node {node} ({op}): {detail}")]
    NodeShape {
        node: NodeId,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} ({op}): {source}")]
    Node {
        node: NodeId,
        op: &'static str,
        #[source]
        source: Box<NumericsError>,
    },
    #[error("unsupported op kind: {0}")]
    UnsupportedOp(String),
    #[error("malformed tape: {0}")]
    MalformedTape(String),
    #[error("missing input tensor '{0}'")]
    MissingInput(String),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("unknown output '{0}'")]
    UnknownOutput(String),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("tape has not been evaluated")]
    NotEvaluated,
    #[error("duplicate parameter '{0}'")]
    DuplicateParam(String),
    #[error("gradient for '{0}' but parameter is not trainable")]
    FrozenGradient(String),
    #[error("shape mismatch for '{name}': expected {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}
