//! Built-in verification suites.
//!
//! Two independent oracles certify the numerical core at runtime:
//!
//! * the stochastic-expectation suite draws Monte-Carlo samples from the
//!   stochastic quantizer and checks the empirical mean against the
//!   piecewise-linear surrogate whose derivative the backward pass uses;
//! * the bitwise suite checks the AND+popcount dot product against plain
//!   integer arithmetic and the affine-bridged layer output against the
//!   dequantize-then-matmul reference path.

use crate::bitwise::{BitPlanes, CodeTensor, QuantLinearPacked};
use crate::quant::act::{code_at, surrogate_at, QuantParams};
use crate::rng::SplitMix64;
use crate::stochastic::{deterministic_from_threshold, mc_expectation};
use crate::tensor::{matmul, transpose, Tensor};

/// Outcome of one quantizer configuration in the stochastic suite.
#[derive(Clone, Debug)]
pub struct OracleConfig {
    pub n: u32,
    pub param_set: usize,
    pub max_deviation: f64,
}

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub configs: Vec<OracleConfig>,
    pub max_deviation: f64,
    pub tolerance: f64,
    /// Disagreements between the probability-threshold rule and the
    /// hard-threshold forward pass on off-boundary inputs (must be zero).
    pub threshold_mismatches: usize,
    pub pass: bool,
}

fn random_params(n: u32, rng: &mut SplitMix64) -> QuantParams<f64> {
    let intervals = (1usize << n) - 1;
    let widths: Vec<f64> = (0..intervals).map(|_| rng.next_range(0.05, 1.2)).collect();
    QuantParams::new(
        n,
        rng.next_range(-1.0, 1.0),
        widths,
        rng.next_range(0.5, 2.0),
        rng.next_range(0.5, 2.0),
    )
    .expect("generated parameters are valid")
}

/// Monte-Carlo expectation vs surrogate on a 101-point grid spanning one
/// unit beyond the segment range, three random parameter sets per bit width.
pub fn run_oracle_suite(seed: u64, trials: usize) -> OracleReport {
    let tolerance = 0.01;
    let mut rng = SplitMix64::new(seed);
    let mut configs = Vec::new();
    let mut max_deviation = 0.0f64;
    let mut threshold_mismatches = 0usize;
    for n in 1..=3u32 {
        for param_set in 0..3 {
            let p = random_params(n, &mut rng);
            let d = p.endpoints();
            let lo = d[0] - 1.0;
            let hi = d[d.len() - 1] + 1.0;
            let mut config_max = 0.0f64;
            for k in 0..101 {
                // grid over the scaled-input domain, mapped back through beta1
                let xp = lo + (hi - lo) * k as f64 / 100.0;
                let x = xp / p.beta1;
                let point_seed = seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(((n as u64) << 32) ^ ((param_set as u64) << 16) ^ k as u64);
                let est = mc_expectation(x, &p, trials, point_seed);
                let dev = (est.mean - surrogate_at(x, &p)).abs();
                config_max = config_max.max(dev);

                let off_boundary = p
                    .cut_points()
                    .iter()
                    .all(|&c| (p.beta1 * x - c).abs() > 1e-9);
                if off_boundary && deterministic_from_threshold(x, &p) != code_at(x, &p) {
                    threshold_mismatches += 1;
                }
            }
            max_deviation = max_deviation.max(config_max);
            configs.push(OracleConfig { n, param_set, max_deviation: config_max });
        }
    }
    OracleReport {
        configs,
        max_deviation,
        tolerance,
        threshold_mismatches,
        pass: max_deviation < tolerance && threshold_mismatches == 0,
    }
}

/// Outcome of one bit-width combination in the bitwise suite.
#[derive(Clone, Debug)]
pub struct BitwisePair {
    pub m_bits: u32,
    pub k_bits: u32,
    pub vector_pairs: usize,
    pub integer_mismatches: usize,
    pub max_layer_deviation: f64,
}

#[derive(Clone, Debug)]
pub struct BitwiseReport {
    pub pairs: Vec<BitwisePair>,
    pub integer_mismatches: usize,
    pub layers_checked: usize,
    pub max_layer_deviation: f64,
    pub layer_tolerance: f64,
    pub pass: bool,
}

/// Integer exactness over random vector pairs (lengths 1..=1024, including
/// off-word-boundary lengths) and affine-bridge agreement with the real
/// reference path on random 64x64 layers, for every (M, K) in 1..=4 squared.
pub fn run_bitwise_suite(seed: u64) -> BitwiseReport {
    let layer_tolerance = 1e-9;
    let mut rng = SplitMix64::new(seed);
    let mut pairs = Vec::new();
    let mut integer_mismatches = 0usize;
    let mut layers_checked = 0usize;
    let mut max_layer_deviation = 0.0f64;
    for m in 1..=4u32 {
        for k in 1..=4u32 {
            let vector_pairs = 625;
            let mut mismatches = 0usize;
            for _ in 0..vector_pairs {
                let len = 1 + rng.next_below(1024);
                let a: Vec<u32> = (0..len).map(|_| rng.next_below(1 << m) as u32).collect();
                let w: Vec<u32> = (0..len).map(|_| rng.next_below(1 << k) as u32).collect();
                let brute: u64 = a.iter().zip(w.iter()).map(|(&x, &y)| x as u64 * y as u64).sum();
                let fast = popcount_pair(&a, m, &w, k);
                mismatches += (fast != brute) as usize;
            }
            integer_mismatches += mismatches;

            // random layers against the dequantize-then-matmul reference
            let mut layer_dev = 0.0f64;
            for _ in 0..7 {
                layer_dev = layer_dev.max(random_layer_deviation(m, k, &mut rng));
                layers_checked += 1;
            }
            max_layer_deviation = max_layer_deviation.max(layer_dev);
            pairs.push(BitwisePair {
                m_bits: m,
                k_bits: k,
                vector_pairs,
                integer_mismatches: mismatches,
                max_layer_deviation: layer_dev,
            });
        }
    }
    BitwiseReport {
        pairs,
        integer_mismatches,
        layers_checked,
        max_layer_deviation,
        layer_tolerance,
        pass: integer_mismatches == 0 && max_layer_deviation < layer_tolerance,
    }
}

fn popcount_pair(a: &[u32], m: u32, w: &[u32], k: u32) -> u64 {
    let pa = BitPlanes::pack(a, m).expect("codes fit the declared width");
    let pw = BitPlanes::pack(w, k).expect("codes fit the declared width");
    crate::bitwise::popcount_dot(&pa, &pw).expect("equal lengths")
}

fn random_layer_deviation(m: u32, k: u32, rng: &mut SplitMix64) -> f64 {
    let (batch, input, out) = (2usize, 64usize, 64usize);
    let act_scale = rng.next_range(0.1, 1.5);
    let w_scale = 2.0 / ((1u32 << k) - 1) as f64;
    let w_codes: Vec<u32> = (0..out * input).map(|_| rng.next_below(1 << k) as u32).collect();
    let a_codes: Vec<u32> = (0..batch * input).map(|_| rng.next_below(1 << m) as u32).collect();
    let bias: Vec<f64> = (0..out).map(|_| rng.next_range(-1.0, 1.0)).collect();
    let layer = QuantLinearPacked::new(
        &CodeTensor {
            codes: w_codes.clone(),
            shape: vec![out, input],
            bit_width: k,
            scale: w_scale,
            offset: -1.0,
        },
        m,
        act_scale,
        Some(bias.clone()),
    )
    .expect("valid layer");
    let acts = CodeTensor {
        codes: a_codes,
        shape: vec![batch, input],
        bit_width: m,
        scale: act_scale,
        offset: 0.0,
    };
    let fast = layer.infer(&acts).expect("matching dims");
    let a_real = acts.dequantize().expect("valid codes");
    let w_real = Tensor::new(
        vec![out, input],
        w_codes.iter().map(|&c| w_scale * c as f64 - 1.0).collect(),
    )
    .expect("valid shape");
    let mut reference = matmul(&a_real, &transpose(&w_real).expect("rank 2")).expect("dims agree");
    for (i, v) in reference.data_mut().iter_mut().enumerate() {
        *v += bias[i % out];
    }
    fast.max_abs_diff(&reference)
}
