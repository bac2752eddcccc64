//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values are computed eagerly while a program is recorded on a [`Graph`].
//! [`Graph::gradient`] appends the backward computation to the same graph as
//! ordinary nodes, so a gradient can be differentiated again. This is what
//! lets the outer IRL loop differentiate through unrolled action updates.

mod check;
mod graph;
mod tensor;

pub use check::{finite_difference_check, numeric_gradient, relative_error, second_order_check};
pub use graph::{Graph, Node, Primitive, Var};
pub use tensor::{dot_seq, sum_seq, Tensor};
