//! Dense tensors and reverse-mode automatic differentiation.

mod check;
mod graph;
mod tensor;

pub use check::{finite_difference_grad, gradient_check, relative_error, GradientEntry, GradientReport};
pub use graph::{Backprop, Bindings, Evaluation, Graph, Node, NodeId, Op};
pub use tensor::{Real, Tensor};
