//! Sound event detection with a state-space context encoder and an exact
//! semi-Markov CRF over event intervals.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod config;
pub mod encoder;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod nn;
pub mod postprocess;
pub mod scorenet;
pub mod semicrf;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
