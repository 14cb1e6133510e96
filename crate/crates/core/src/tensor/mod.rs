//! Minimal N-dimensional arrays with tape-based reverse-mode differentiation.

mod array;
pub mod gradcheck;
pub(crate) mod kernels;
mod ops;
mod tape;

pub use array::Tensor;
pub use tape::{NodeId, Tape, Var};

#[cfg(test)]
mod tests;
