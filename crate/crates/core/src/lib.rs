//! Self-supervised pretext training for marked event sequences.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod autodiff;
pub mod contrastive;
pub mod data;
pub mod downstream;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod masking;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
