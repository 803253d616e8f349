//! Quantizers for activations and weights.
//!
//! Activation quantization maps real inputs through learnable in-equidistant
//! thresholds onto equidistant output levels; its backward pass is the
//! generalized straight-through estimator. Weight quantization uses fixed
//! equidistant thresholds behind one of several interchangeable rescaling
//! schemes. Both families are selected by name through [`registry`].

pub mod act;
pub mod registry;
pub mod weight;

/// Whether quantizing graph nodes emit exact hard-threshold values or the
/// piecewise-linear expectation their backward pass differentiates. The
/// surrogate mode exists for gradient verification.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    Exact,
    Surrogate,
}
