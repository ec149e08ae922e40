//! Dense tensors with an eager reverse-mode autodiff tape.

mod check;
mod graph;
mod tensor;

pub use check::{finite_difference_check, FiniteDifferenceReport, RELATIVE_FLOOR};
pub use graph::{Gradients, Graph, LeafKind, NodeId};
pub use tensor::Tensor;
