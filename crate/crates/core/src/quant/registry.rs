//! Name registry for the quantization strategy families.
//!
//! Training configs and the command line select strategies by these names;
//! an unknown name is a parse error listing what is available.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::quant::act::{ActScheme, N2uqAct, UniformAct};
use crate::quant::weight::{
    EntropyScheme, LearnedScaleScheme, TanhMaxScheme, WeightNormScheme, WeightScheme,
};
use crate::tensor::Real;

/// Registered activation-quantizer strategies.
pub const ACT_SCHEMES: &[&str] = &["n2uq", "uniform"];

/// Registered weight-rescale strategies.
pub const WEIGHT_SCHEMES: &[&str] = &["entropy", "tanh-max", "weight-norm", "learned-scale"];

pub fn act_scheme<T: Real>(name: &str) -> Result<Arc<dyn ActScheme<T>>> {
    match name {
        "n2uq" => Ok(Arc::new(N2uqAct)),
        "uniform" => Ok(Arc::new(UniformAct)),
        other => Err(Error::Parse(format!(
            "unknown activation quantizer '{other}' (available: {})",
            ACT_SCHEMES.join(", ")
        ))),
    }
}

pub fn weight_scheme<T: Real>(name: &str) -> Result<Arc<dyn WeightScheme<T>>> {
    match name {
        "entropy" => Ok(Arc::new(EntropyScheme)),
        "tanh-max" => Ok(Arc::new(TanhMaxScheme)),
        "weight-norm" => Ok(Arc::new(WeightNormScheme)),
        "learned-scale" => Ok(Arc::new(LearnedScaleScheme)),
        other => Err(Error::Parse(format!(
            "unknown weight quantizer '{other}' (available: {})",
            WEIGHT_SCHEMES.join(", ")
        ))),
    }
}
