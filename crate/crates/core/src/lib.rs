//! Attribution toolkit over a small from-scratch CNN engine, with spectral
//! analysis of attribution maps and low-pass repair of input gradients.

pub mod attribution;
pub mod data;
pub mod error;
pub mod experiments;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod repair;
pub mod rng;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
