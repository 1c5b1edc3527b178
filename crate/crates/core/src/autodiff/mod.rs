//! Minimal reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and a [`Backward`] rule, so node order is already topological.
//! Parameters live outside the tape in a [`ParamStore`] and are copied in as
//! leaves for each step.

mod adam;
mod conv;
#[cfg(test)]
pub(crate) mod gradcheck;
mod graph;
mod ops;
mod resample;
mod tensor;

pub use adam::{OptimizerState, ParamStore};
pub use graph::{Backward, Graph, Var};
pub use tensor::Tensor;
