//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Only the primitives the flow model needs are provided. Arrays are
//! immutable once pushed on a [`Tape`]; a tape belongs to one evaluation and
//! must not be shared across threads.

mod array;
pub mod check;
mod gemm;
mod params;
mod tape;

pub use array::Array;
pub use params::{Graph, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
}
