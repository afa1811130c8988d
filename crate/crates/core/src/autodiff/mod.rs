//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records primitive operations in append order. `forward`
//! evaluates them in that order and caches every intermediate value;
//! `backward` walks the record in exact reverse order and accumulates
//! gradients additively. There is no broadcasting apart from adding a bias
//! row; any other shape disagreement is an error naming the node.

mod array;
mod tape;

pub use array::Array2;
pub use tape::{dropout, softmax_rows, Bindings, Gradients, Mode, NodeId, Tape, Unary};
pub(crate) use tape::dropout_mask;

/// Negative slope used for every leaky ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;
