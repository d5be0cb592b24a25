//! Numeric substrate: row-major `f64` tensors, bit-packed boolean matrices,
//! a reverse-mode differentiation tape, and checkpoint serialization.
//!
//! Everything is single-threaded and uses fixed row-major reduction order, so
//! identical inputs produce bit-identical outputs and gradients.

mod bits;
mod checkpoint;
mod tape;
pub(crate) mod tensor;

pub use bits::BitMatrix;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use tape::{Gradients, ParamId, ParamStore, Tape, ValueId};
pub use tensor::{argmax_row, Tensor2D};

use std::fmt;

/// Errors raised by tensor ops, the tape, and checkpoint IO.
#[derive(Debug)]
pub enum NumericsError {
    /// Operand shapes are incompatible for the requested op.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A softmax row had no allowed entries.
    DegenerateSoftmaxRow { row: usize },
    /// Cross-entropy was asked to average over zero loss-bearing rows.
    EmptyLoss,
    /// A row or column index (token id, label, gather index) is out of range.
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// A non-finite value appeared where one is not allowed.
    NonFinite { op: &'static str },
    /// Checkpoint IO failed.
    Io(std::io::Error),
    /// Checkpoint bytes do not follow the expected layout.
    Format(String),
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericsError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            NumericsError::DegenerateSoftmaxRow { row } => {
                write!(f, "masked softmax: row {row} has no allowed entries")
            }
            NumericsError::EmptyLoss => write!(f, "cross-entropy: no loss-bearing rows"),
            NumericsError::IndexOutOfRange { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (bound {bound})")
            }
            NumericsError::NonFinite { op } => write!(f, "{op}: non-finite value"),
            NumericsError::Io(e) => write!(f, "checkpoint io: {e}"),
            NumericsError::Format(m) => write!(f, "checkpoint format: {m}"),
        }
    }
}

impl std::error::Error for NumericsError {}

impl From<std::io::Error> for NumericsError {
    fn from(e: std::io::Error) -> Self {
        NumericsError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, NumericsError>;
