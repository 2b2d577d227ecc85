//! Reverse-mode automatic differentiation over dense row-major arrays.
//!
//! A [`Tape`] records one forward pass; every operation on a [`Var`] appends a node
//! holding its value and a closure that maps the output gradient back to its inputs.
//! Ops are coarse-grained (whole convolutions, normalizations, losses) with hand-written
//! backward passes, so a single forward/backward of a small convolutional network is a
//! few hundred nodes rather than tens of thousands.
//!
//! Arithmetic is generic over [`Scalar`]: models train in `f32` and are verified in `f64`.

mod array;
mod error;
pub mod gradcheck;
mod ops;
mod scalar;
mod tape;

pub use array::Array;
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
