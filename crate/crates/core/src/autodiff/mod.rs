//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every primitive in creation order, so parents always
//! precede children. [`Tape::backward`] walks the records in reverse and adds
//! into gradient accumulators; a tensor feeding several consumers receives the
//! sum of their contributions.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{sigmoid, softplus, softplus_inverse, Tape, Var, WindowEntry, WindowSpec, NORM_EPS};
pub use tensor::{Mask, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}
