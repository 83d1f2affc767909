//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! Only the operations needed by the losses and the tiny matcher exist.
//! Broadcasting is limited to scalar operands.

mod array;
pub(crate) mod kernels;
mod tape;

pub use array::{Array, Shape};
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
pub(crate) use tape::sigmoid;

#[cfg(test)]
mod tests;
