//! Dense tensors and reverse-mode automatic differentiation.
//!
//! [`TensorData`] is a plain value; [`Tape`] records operations define-by-run
//! and replays them in reverse for gradients; [`grad_check`] verifies any
//! scalar function's tape gradients against central differences.

mod check;
mod data;
mod tape;

pub use check::{fd_error, fd_noise_floor, grad_check, relative_error, GradCheckReport};
pub use data::{Mask, Param, Precision, Real, TensorData};
pub use tape::{Tape, Tensor};

pub(crate) use data::fmath;

#[cfg(test)]
mod tests;
