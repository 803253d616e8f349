//! Quantization-aware training with learnable input thresholds, entropy-
//! preserving weight rescaling, and an exact popcount-based inference engine.
//!
//! The crate is organized around a small tape-based autodiff core
//! ([`graph`]), two quantizer strategy families selected by name
//! ([`quant::registry`]), a stochastic sampler that serves as the independent
//! oracle for the quantizer's backward pass ([`stochastic`]), a bit-serial
//! matrix-multiply engine ([`bitwise`]), and a desk-scale training harness
//! ([`nn`]).

pub mod bitwise;
pub mod error;
pub mod graph;
pub mod nn;
pub mod packfile;
pub mod quant;
pub mod rng;
pub mod selfcheck;
pub mod stochastic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
