//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! The crate has two layers:
//!
//! * [`Tensor`]: an immutable-by-convention, row-major value with shape
//!   algebra (broadcasting, permutation, slicing along the batch axis).
//! * [`Tape`] / [`Var`]: a per-forward-pass record of differentiable
//!   operations. Calling [`Tape::backward`] on a scalar fills in gradients
//!   for every leaf created with [`Tape::param`].
//!
//! Transpositions and permutations always materialize; there are no strided
//! views. Matrix products run through `matrixmultiply`'s single-threaded
//! kernels, so results are bit-deterministic for fixed inputs.

mod error;
pub mod gradcheck;
mod linalg;
mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport, GradMismatch};
pub use ops::{select, MASK_SENTINEL};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;
