//! Dense `f64` tensors with a recorded computation tape for reverse-mode
//! differentiation.
//!
//! Forward values are computed eagerly when an operation is pushed onto a
//! [`Tape`]; [`Tape::backward`] then walks the tape in reverse. The pure
//! functions in [`ops`] evaluate the same kernels without recording.

mod check;
pub mod ops;
mod tape;
mod tensor;

pub use check::finite_diff_check;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
