//! Dynamic-frame invariant attention encoder for periodic crystals.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod crystal;
pub mod data;
pub mod error;
pub mod features;
pub mod frames;
pub mod images;
pub mod model;
pub mod train;

pub use error::{Error, Result};
