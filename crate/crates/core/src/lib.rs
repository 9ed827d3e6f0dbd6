//! Fast adversarial training with prior-guided knowledge.

// `!(x > 0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod models;
pub mod pgi;
pub mod real;
pub mod trainer;
pub mod wa;

pub use error::{Error, Result};
pub use real::Real;
