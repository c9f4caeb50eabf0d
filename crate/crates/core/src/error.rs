//! Error type shared by every module in the crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two tensor shapes that were supposed to line up did not.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A softmax row had every position masked out.
    FullyMaskedRow { op: &'static str, row: usize },
    /// Cosine of a zero vector is undefined.
    ZeroVector { op: &'static str, position: usize },
    /// A token id fell outside the embedding or output vocabulary.
    TokenOutOfRange {
        op: &'static str,
        id: usize,
        vocab: usize,
    },
    /// `backward` was called on a tensor with more than one element.
    NonScalarLoss { numel: usize },
    /// A gradient became NaN or infinite during an optimizer step.
    NonFiniteGradient { param: String },
    /// The training loss became NaN or infinite.
    NonFiniteLoss { step: u64 },
    /// Invalid configuration or argument; the message names the field.
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::FullyMaskedRow { op, row } => {
                write!(f, "{op}: row {row} has every position masked")
            }
            Error::ZeroVector { op, position } => {
                write!(f, "{op}: zero vector at position {position}")
            }
            Error::TokenOutOfRange { op, id, vocab } => {
                write!(f, "{op}: token id {id} out of range for vocab {vocab}")
            }
            Error::NonScalarLoss { numel } => {
                write!(f, "backward: loss must be a scalar, got {numel} elements")
            }
            Error::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient in parameter {param}")
            }
            Error::NonFiniteLoss { step } => {
                write!(f, "non-finite loss at step {step}")
            }
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
