//! Fully-connected networks trained with zigzag-masked DCT weights, compiled
//! into frequency inference chains that need one DCT at the input and one
//! IDCT at the output.
//!
//! The pipeline is [`nn::Trainer`] → [`compile::compile_model`] →
//! [`runtime::InferenceSession`]. [`format::ModelFile`] stores either end.

// `!(x >= 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod compile;
pub mod data;
pub mod dct;
pub mod error;
pub mod format;
pub mod freqreg;
pub mod nn;
pub mod runtime;

pub use error::{Error, Result};
