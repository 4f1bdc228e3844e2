#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod baselines;
pub mod channel;
pub mod cmatrix;
pub mod error;
pub mod geometry;
pub mod mamba;
pub mod metrics;
pub mod net;
pub mod pilot;
pub mod pipeline;
pub mod rng;
pub mod sample;
pub mod sweep;

pub use error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
