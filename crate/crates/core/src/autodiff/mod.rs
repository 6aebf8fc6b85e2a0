//! Dense tensors with reverse-mode automatic differentiation.

mod backward;
mod element;
pub mod io;
mod ops;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
