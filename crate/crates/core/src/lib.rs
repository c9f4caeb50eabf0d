//! Encoder-decoder transformer with pluggable layer-fusion strategies.
//!
//! The crate is organized around a small reverse-mode autodiff tape
//! ([`tensor`]), transformer building blocks ([`model`]), six ways of wiring
//! layer outputs together ([`fusion`]), a diversity regularizer
//! ([`diversity`]), synthetic sequence tasks ([`tasks`]), a training and
//! decoding loop ([`train`]), and aggregation inspection tools ([`analysis`]).
//!
//! The core is `no_std` (alloc only); file formats, CLI, and anything that
//! touches the OS live in the companion `dfsq` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod diversity;
pub mod error;
pub mod fusion;
pub mod model;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use fusion::{AggFn, FusionKind, FusionStrategy, LayerStates, ResidualMode};
pub use model::{Model, ModelConfig};
pub use tensor::{Mask, Param, Precision, Real, Tape, Tensor, TensorData};
