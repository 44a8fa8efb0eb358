//! Reverse-mode differentiation over a closed set of tensor primitives.
//!
//! Computations are recorded define-by-run into a [`CompGraph`]; a reverse
//! sweep then populates adjoints for every node. Model code is written
//! against the [`Backend`] trait so the same forward pass runs either on
//! the recording graph (training) or on the [`Eager`] evaluator
//! (inference), with identical arithmetic.

mod adam;
mod gradcheck;
mod graph;
mod prim;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{eval_graph, Backend, CompGraph, Eager, Gradients, Node, NodeId, NodeKind};
pub use prim::{backward as prim_backward, forward as prim_forward, Prim};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("{prim}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        prim: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{prim}: expected different number of inputs, got {got}")]
    Arity { prim: String, got: usize },
    #[error("slice axis {axis} range {start}..{end} out of bounds for shape {shape:?}")]
    SliceRange {
        axis: usize,
        start: usize,
        end: usize,
        shape: Vec<usize>,
    },
    #[error("tensor rank {rank} unsupported (max 2)")]
    Rank { rank: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("ragged rows")]
    Ragged,
    #[error("{prim}: produced non-finite values")]
    NonFinite { prim: String },
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape { output: Vec<usize>, seed: Vec<usize> },
    #[error("non-finite value: {0}")]
    NonFiniteInput(String),
    #[error("parameter/gradient shape mismatch at tensor {index}")]
    ParamShape { index: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}
