//! Reverse-mode automatic differentiation over an append-only graph.
//!
//! Every operation evaluates eagerly and records a node. [`Graph::grad`]
//! walks the recorded nodes backwards and emits the adjoint computation as
//! *new nodes in the same graph*, so the result of one `grad` call can be
//! differentiated again. Gradient inversion relies on this: the matching
//! loss is a function of a parameter gradient and is itself differentiated
//! with respect to the candidate input.
//!
//! Graphs are cheap to build and are meant to be rebuilt for each
//! evaluation.

mod check;
mod graph;
mod linalg;

pub use check::{central_difference, grad_check};
pub use graph::{Graph, NodeId};
