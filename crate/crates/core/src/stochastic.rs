//! Stochastic binarization/quantization samplers and their Monte-Carlo
//! expectation.
//!
//! These samplers are the independent oracle for the G-STE backward pass: the
//! deterministic quantizer thresholds each per-segment probability at 0.5,
//! and the backward slope is the derivative of the stochastic quantizer's
//! expectation. The suites in `selfcheck` certify both identities
//! numerically.

use crate::quant::act::QuantParams;
use crate::rng::SplitMix64;
use crate::tensor::Real;

/// One stochastic draw: the sampled code, the probability of the lower of
/// the two candidate levels at this input, and the generator state after
/// the draw (replays continue from here).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StochasticSample {
    pub value: u32,
    pub probability_low: f64,
    pub rng_state: u64,
}

/// Binarizes to -1/+1 with `P(+1) = clip((1 + x) / 2, 0, 1)`.
pub fn stochastic_binarize(x: f64, rng: &mut SplitMix64) -> i32 {
    let p_high = ((1.0 + x) / 2.0).clamp(0.0, 1.0);
    if rng.next_f64() < p_high {
        1
    } else {
        -1
    }
}

/// Draws a code for the scaled input. Within segment `i`
/// (`d_{i-1} <= x' < d_i`) the draw is `i` with probability
/// `(x' - d_{i-1}) / a_i`, else `i - 1`; outside the segments the code
/// saturates deterministically.
pub fn sample_quantize<T: Real>(
    x: T,
    p: &QuantParams<T>,
    rng: &mut SplitMix64,
) -> StochasticSample {
    let xp = (p.beta1 * x).as_f64();
    let d: Vec<f64> = p.endpoints().iter().map(|v| v.as_f64()).collect();
    let last = d.len() - 1;
    if xp < d[0] {
        return StochasticSample { value: 0, probability_low: 1.0, rng_state: rng.state() };
    }
    if xp >= d[last] {
        return StochasticSample {
            value: last as u32,
            probability_low: 0.0,
            rng_state: rng.state(),
        };
    }
    for i in 1..=last {
        if xp < d[i] {
            let width = p.widths[i - 1].as_f64();
            let p_high = ((xp - d[i - 1]) / width).clamp(0.0, 1.0);
            let value = if rng.next_f64() < p_high { i as u32 } else { (i - 1) as u32 };
            return StochasticSample {
                value,
                probability_low: 1.0 - p_high,
                rng_state: rng.state(),
            };
        }
    }
    StochasticSample { value: last as u32, probability_low: 0.0, rng_state: rng.state() }
}

/// Code of one stochastic draw.
pub fn stochastic_quantize<T: Real>(x: T, p: &QuantParams<T>, rng: &mut SplitMix64) -> u32 {
    sample_quantize(x, p, rng).value
}

/// Empirical mean of stochastic draws with its standard error.
#[derive(Clone, Copy, Debug)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
}

/// Monte-Carlo estimate of the expected stochastic code at `x`.
pub fn mc_expectation<T: Real>(x: T, p: &QuantParams<T>, trials: usize, seed: u64) -> McEstimate {
    assert!(trials >= 1, "mc_expectation requires at least one trial");
    let mut rng = SplitMix64::new(seed);
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for _ in 0..trials {
        let v = stochastic_quantize(x, p, &mut rng) as f64;
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / trials as f64;
    let var = (sum_sq / trials as f64 - mean * mean).max(0.0);
    McEstimate {
        mean,
        stderr: (var / trials as f64).sqrt(),
        trials,
    }
}

/// Deterministic quantization derived by thresholding the per-segment
/// probability at 0.5 (code `i` once `probability_low <= 0.5`). Equals the
/// hard-threshold forward pass everywhere off the cut points, and on them.
#[allow(clippy::needless_range_loop)] // the index is the 1-based segment number
pub fn deterministic_from_threshold<T: Real>(x: T, p: &QuantParams<T>) -> u32 {
    let xp = (p.beta1 * x).as_f64();
    let d: Vec<f64> = p.endpoints().iter().map(|v| v.as_f64()).collect();
    let last = d.len() - 1;
    if xp < d[0] {
        return 0;
    }
    if xp >= d[last] {
        return last as u32;
    }
    for i in 1..=last {
        if xp < d[i] {
            let width = p.widths[i - 1].as_f64();
            let p_low = ((d[i] - xp) / width).clamp(0.0, 1.0);
            return if p_low <= 0.5 { i as u32 } else { (i - 1) as u32 };
        }
    }
    last as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::act::{code_at, surrogate_at};

    fn nonuniform2() -> QuantParams<f64> {
        QuantParams::new(2, 0.0, vec![0.2, 1.0, 0.8], 1.0, 1.0).unwrap()
    }

    #[test]
    fn binarize_saturates() {
        let mut rng = SplitMix64::new(1);
        for _ in 0..1000 {
            assert_eq!(stochastic_binarize(2.0, &mut rng), 1);
            assert_eq!(stochastic_binarize(-2.0, &mut rng), -1);
        }
    }

    #[test]
    fn binarize_mean_matches_clipped_identity() {
        let n = 100_000;
        for (x, expected) in [(0.0, 0.0), (0.5, 0.5), (-0.3, -0.3)] {
            let mut rng = SplitMix64::new(42);
            let mean: f64 = (0..n)
                .map(|_| stochastic_binarize(x, &mut rng) as f64)
                .sum::<f64>()
                / n as f64;
            assert!((mean - expected).abs() < 0.01, "x={x}: mean {mean}");
        }
    }

    #[test]
    fn samples_carry_probability_and_state() {
        let p = nonuniform2();
        let mut rng = SplitMix64::new(2);
        for _ in 0..500 {
            let x = rng.next_range(-1.0, 3.0);
            let sample = sample_quantize(x, &p, &mut rng);
            assert!((0.0..=1.0).contains(&sample.probability_low));
            assert_eq!(sample.rng_state, rng.state());
        }
        // replaying from the recorded state yields the same continuation
        let mut a = SplitMix64::new(9);
        let first = sample_quantize(0.5, &p, &mut a);
        let mut b = SplitMix64::new(first.rng_state);
        assert_eq!(stochastic_quantize(0.5, &p, &mut a), stochastic_quantize(0.5, &p, &mut b));
    }

    #[test]
    fn quantize_at_segment_start_is_deterministic() {
        let p = nonuniform2();
        let mut rng = SplitMix64::new(3);
        for _ in 0..1000 {
            assert_eq!(stochastic_quantize(0.0, &p, &mut rng), 0);
        }
    }

    #[test]
    fn quantize_midpoint_splits_evenly() {
        let p = nonuniform2();
        let mid = 0.1; // midpoint of segment 1 ([0, 0.2])
        let mut rng = SplitMix64::new(5);
        let n = 100_000;
        let mut ones = 0usize;
        for _ in 0..n {
            let code = stochastic_quantize(mid, &p, &mut rng);
            assert!(code <= 1);
            ones += (code == 1) as usize;
        }
        let frac = ones as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "frac {frac}");
    }

    #[test]
    fn mean_code_matches_surrogate_value() {
        let p = nonuniform2();
        let est = mc_expectation(0.5, &p, 100_000, 7);
        assert!((est.mean - 1.3).abs() < 0.01, "mean {}", est.mean);
        assert!((est.mean - surrogate_at(0.5, &p)).abs() < 4.0 * est.stderr.max(1e-4));
    }

    #[test]
    fn single_trial_equals_single_draw() {
        let p = nonuniform2();
        let est = mc_expectation(0.5, &p, 1, 11);
        let mut rng = SplitMix64::new(11);
        assert_eq!(est.mean, stochastic_quantize(0.5, &p, &mut rng) as f64);
        assert_eq!(est.trials, 1);
    }

    #[test]
    fn saturation_is_exact_for_any_trial_count() {
        let p = nonuniform2();
        for trials in [1, 10, 1000] {
            let est = mc_expectation(50.0, &p, trials, 13);
            assert_eq!(est.mean, 3.0);
            assert_eq!(est.stderr, 0.0);
        }
    }

    #[test]
    fn threshold_rule_matches_forward_pass() {
        let defaults = QuantParams::<f64>::defaults(2).unwrap();
        assert_eq!(deterministic_from_threshold(0.5, &defaults), 1);
        assert_eq!(deterministic_from_threshold(0.5, &defaults), code_at(0.5, &defaults));
        // exactly on the first cut point: probability_low = 0.5 quantizes up
        let cut = defaults.start + defaults.widths[0] / 2.0;
        assert_eq!(deterministic_from_threshold(cut, &defaults), 1);
        assert_eq!(deterministic_from_threshold(-1.0, &defaults), 0);
    }

    #[test]
    fn threshold_rule_equals_forward_on_random_inputs() {
        let mut rng = SplitMix64::new(19);
        for n in 1..=3u32 {
            let intervals = (1usize << n) - 1;
            let widths: Vec<f64> = (0..intervals).map(|_| rng.next_range(0.05, 1.0)).collect();
            let p = QuantParams::new(n, rng.next_range(-0.5, 0.5), widths, 1.0, 1.0).unwrap();
            let cuts = p.cut_points();
            let mut checked = 0;
            while checked < 10_000 {
                let x = rng.next_range(p.start - 1.0, p.start + 4.0);
                if cuts.iter().any(|&c| (x - c).abs() < 1e-9) {
                    continue;
                }
                checked += 1;
                assert_eq!(deterministic_from_threshold(x, &p), code_at(x, &p), "n={n} x={x}");
            }
        }
    }

    #[test]
    fn binarizer_special_case_reproduces_signed_pipeline() {
        // n = 1, s = -1, a = [2]: codes {0,1} relabel to levels {-1,+1}.
        let p = QuantParams::new(1, -1.0, vec![2.0], 1.0, 1.0).unwrap();
        let mut rng = SplitMix64::new(23);
        let n = 100_000;
        for x in [-0.6f64, 0.0, 0.4] {
            // stochastic: mean level = clip(x, -1, 1)
            let mut sum = 0.0;
            for _ in 0..n {
                let level = 2.0 * stochastic_quantize(x, &p, &mut rng) as f64 - 1.0;
                sum += level;
            }
            let mean = sum / n as f64;
            assert!((mean - x.clamp(-1.0, 1.0)).abs() < 0.015, "x={x}: {mean}");
            // deterministic: sign threshold at zero
            let level = 2.0 * deterministic_from_threshold(x, &p) as f64 - 1.0;
            let expected = if x >= 0.0 { 1.0 } else { -1.0 };
            assert_eq!(level, expected, "x={x}");
            // expectation slope: d(2E-1)/dx = 2 * (1/2) = 1 inside (-1, 1)
            let e_plus = 2.0 * surrogate_at(x + 1e-6, &p) - 1.0;
            let e_minus = 2.0 * surrogate_at(x - 1e-6, &p) - 1.0;
            let slope = (e_plus - e_minus) / 2e-6;
            assert!((slope - 1.0).abs() < 1e-6, "x={x}: slope {slope}");
        }
    }
}
