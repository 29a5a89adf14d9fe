//! Stage-aware RoPE remapping and entropy-driven attention calibration for
//! scale-wise (next-scale prediction) autoregressive transformers.
//!
//! The crate is `no_std` and only needs `alloc`. Transcendental functions go
//! through [`libm`], so results are identical on every target. File formats,
//! the command-line front end and thread-parallel head execution live in the
//! `extravar` companion crate.

#![no_std]
#![allow(clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
mod error;
pub mod matrix;
pub mod model;
pub mod probe;
pub mod reference;
pub mod rng;
pub mod rope;

pub use crate::error::{Error, Result};
pub use crate::matrix::Matrix;
