//! Activation quantizer with learnable input thresholds and uniform output
//! levels, trained through the generalized straight-through estimator (G-STE).
//!
//! The forward pass thresholds the scaled input `x' = beta1 * x` into integer
//! codes `0 ..= 2^n - 1`: the code switches from `i-1` to `i` at the cut point
//! `d_{i-1} + a_i / 2`, where `d_0 = s` and `d_i = s + a_1 + ... + a_i` are the
//! segment endpoints and the interval widths `a_i` are learnable. Codes are
//! affinely dequantized by `out_scale = beta2 * 2 / (2^n - 1)`, so the output
//! levels are `beta2 * {0, 2/(2^n-1), ..., 2}`.
//!
//! The backward pass differentiates not the staircase but its stochastic
//! expectation: the piecewise-linear surrogate
//! `E(x') = (x' - d_{i-1}) / a_i + i - 1` on segment `i`, clipped to
//! `[0, 2^n - 1]`. Per element the slope is `1 / a_i` inside segment `i` and
//! zero outside; the threshold-parameter gradients follow by the chain rule
//! through `d_{i-1}`. With equal interval widths this degenerates to the
//! classic clipped-identity straight-through estimator.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::CustomOp;
use crate::quant::QuantMode;
use crate::tensor::{Real, Tensor};

/// Lower bound enforced on every interval width after each optimizer step.
pub const MIN_INTERVAL: f64 = 1e-3;

/// Learnable state of one layer's activation quantizer: start point `s`,
/// `2^n - 1` interval widths `a_i`, and the input/output scales
/// `beta1`/`beta2`. Exactly `2^n + 2` scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantParams<T> {
    n: u32,
    pub start: T,
    pub widths: Vec<T>,
    pub beta1: T,
    pub beta2: T,
}

impl<T: Real> QuantParams<T> {
    pub fn new(n: u32, start: T, widths: Vec<T>, beta1: T, beta2: T) -> Result<Self> {
        if !(1..=8).contains(&n) {
            return Err(Error::contract(format!("bit-width {n} outside 1..=8")));
        }
        let expected = (1usize << n) - 1;
        if widths.len() != expected {
            return Err(Error::contract(format!(
                "{n}-bit quantizer needs {expected} interval widths, got {}",
                widths.len()
            )));
        }
        for (i, w) in widths.iter().enumerate() {
            if !w.is_finite() || *w <= T::zero() {
                return Err(Error::contract(format!(
                    "interval width a_{} must be finite and positive, got {w}",
                    i + 1
                )));
            }
        }
        if !start.is_finite() || !beta1.is_finite() || !beta2.is_finite() {
            return Err(Error::contract("non-finite quantizer parameter"));
        }
        Ok(Self { n, start, widths, beta1, beta2 })
    }

    /// Default initialization: `s = 0`, every `a_i = 2 / (2^n - 1)`,
    /// `beta1 = beta2 = 1`.
    pub fn defaults(n: u32) -> Result<Self> {
        if n < 1 {
            return Err(Error::contract("bit-width must be at least 1"));
        }
        let intervals = (1usize << n) - 1;
        let width = T::from_f64(2.0 / intervals as f64);
        Self::new(n, T::zero(), vec![width; intervals], T::one(), T::one())
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    /// Number of output levels, `2^n`.
    pub fn levels(&self) -> usize {
        1usize << self.n
    }

    /// Number of input segments, `2^n - 1`.
    pub fn intervals(&self) -> usize {
        self.widths.len()
    }

    /// Learnable scalars held by this quantizer: `2^n + 2`.
    pub fn scalar_count(&self) -> usize {
        self.levels() + 2
    }

    /// Segment endpoints `d_0 ..= d_{2^n-1}` (length `2^n`), strictly
    /// increasing because every width is positive.
    pub fn endpoints(&self) -> Vec<T> {
        let mut d = Vec::with_capacity(self.widths.len() + 1);
        let mut acc = self.start;
        d.push(acc);
        for &w in &self.widths {
            acc += w;
            d.push(acc);
        }
        d
    }

    /// Forward cut points `d_{i-1} + a_i / 2` at which the output code
    /// increments (length `2^n - 1`).
    pub fn cut_points(&self) -> Vec<T> {
        let half = T::from_f64(0.5);
        let d = self.endpoints();
        self.widths
            .iter()
            .enumerate()
            .map(|(i, &w)| d[i] + w * half)
            .collect()
    }

    /// Dequantization factor `beta2 * 2 / (2^n - 1)`.
    pub fn out_scale(&self) -> T {
        self.beta2 * T::from_f64(2.0 / ((1usize << self.n) - 1) as f64)
    }

    /// Floors every interval width at [`MIN_INTERVAL`]; `s`, `beta1`, `beta2`
    /// are left untouched. Applied after every optimizer step.
    pub fn clamp(&mut self) {
        clamp_widths(&mut self.widths);
    }

    pub fn clamped(&self) -> Self {
        let mut p = self.clone();
        p.clamp();
        p
    }
}

/// Floors interval widths at [`MIN_INTERVAL`] in place.
pub fn clamp_widths<T: Real>(widths: &mut [T]) {
    let floor = T::from_f64(MIN_INTERVAL);
    for w in widths.iter_mut() {
        // NaN also resets to the floor
        if w.is_nan() || *w < floor {
            *w = floor;
        }
    }
}

/// Integer quantization codes plus the affine metadata needed to read them
/// back as real activation levels (`value = out_scale * code`).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCodes<T> {
    codes: Vec<u32>,
    shape: Vec<usize>,
    n: u32,
    out_scale: T,
}

impl<T: Real> ActivationCodes<T> {
    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn out_scale(&self) -> T {
        self.out_scale
    }

    pub fn dequantize(&self) -> Tensor<T> {
        let data = self
            .codes
            .iter()
            .map(|&c| self.out_scale * T::from_f64(c as f64))
            .collect();
        Tensor::new(self.shape.clone(), data).expect("codes carry their own shape")
    }
}

/// Per-element location of the scaled input relative to the segments.
/// `Below`/`Above` are the saturated regions where all gradients vanish.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Segment {
    Below,
    /// 1-based segment index `i` with `d_{i-1} < x' <= d_i` (gradients at an
    /// exact endpoint use the left segment's formula).
    Interior(usize),
    Above,
}

#[allow(clippy::needless_range_loop)] // the index is the 1-based segment number
fn backward_segment<T: Real>(xp: T, d: &[T]) -> Segment {
    if xp <= d[0] {
        return Segment::Below;
    }
    let last = d.len() - 1;
    if xp > d[last] {
        return Segment::Above;
    }
    for i in 1..=last {
        if xp <= d[i] {
            return Segment::Interior(i);
        }
    }
    Segment::Above
}

/// Expected code of the stochastic quantizer at scaled input `xp`:
/// piecewise linear, continuous, clipped to `[0, 2^n - 1]`.
fn expected_code<T: Real>(xp: T, d: &[T], widths: &[T]) -> T {
    if xp <= d[0] {
        return T::zero();
    }
    let last = d.len() - 1;
    if xp >= d[last] {
        return T::from_f64(last as f64);
    }
    for i in 1..=last {
        if xp < d[i] {
            return (xp - d[i - 1]) / widths[i - 1] + T::from_f64((i - 1) as f64);
        }
    }
    T::from_f64(last as f64)
}

/// Encodes the backward-rule segment of every element for forward-time
/// caching: 0 below the first endpoint, `i` inside segment `i`, `2^n` above
/// the last endpoint. Values are exact in either precision.
pub fn segment_cache<T: Real>(x: &Tensor<T>, p: &QuantParams<T>) -> Tensor<T> {
    let d = p.endpoints();
    let above = d.len() as f64;
    x.map(|v| match backward_segment(p.beta1 * v, &d) {
        Segment::Below => T::zero(),
        Segment::Interior(i) => T::from_f64(i as f64),
        Segment::Above => T::from_f64(above),
    })
}

fn decode_segment(code: f64, last: usize) -> Segment {
    let i = code as usize;
    if i == 0 {
        Segment::Below
    } else if i <= last {
        Segment::Interior(i)
    } else {
        Segment::Above
    }
}

/// Hard-threshold forward pass: integer code per element of `beta1 * x`.
/// Boundary inputs quantize upward (`code = i` once `x' >= d_{i-1} + a_i/2`).
pub fn quantize_forward<T: Real>(x: &Tensor<T>, p: &QuantParams<T>) -> Result<ActivationCodes<T>> {
    let cuts = p.cut_points();
    let codes = x
        .data()
        .iter()
        .map(|&v| {
            let xp = p.beta1 * v;
            cuts.iter().take_while(|&&c| xp >= c).count() as u32
        })
        .collect();
    Ok(ActivationCodes {
        codes,
        shape: x.shape().to_vec(),
        n: p.n,
        out_scale: p.out_scale(),
    })
}

/// Scalar forward code (oracle and inspection convenience).
pub fn code_at<T: Real>(x: T, p: &QuantParams<T>) -> u32 {
    let xp = p.beta1 * x;
    p.cut_points().iter().take_while(|&&c| xp >= c).count() as u32
}

/// Expected code of the stochastic quantizer, `E(beta1 * x)`, in the code
/// domain (no output scaling). This is the function whose derivative G-STE
/// backpropagates.
pub fn surrogate<T: Real>(x: &Tensor<T>, p: &QuantParams<T>) -> Tensor<T> {
    let d = p.endpoints();
    x.map(|v| expected_code(p.beta1 * v, &d, &p.widths))
}

/// Scalar version of [`surrogate`].
pub fn surrogate_at<T: Real>(x: T, p: &QuantParams<T>) -> T {
    let d = p.endpoints();
    expected_code(p.beta1 * x, &d, &p.widths)
}

/// Fully scaled surrogate `out_scale * E(beta1 * x)`: the differentiable
/// stand-in for the dequantized forward output.
pub fn surrogate_dequant<T: Real>(x: &Tensor<T>, p: &QuantParams<T>) -> Tensor<T> {
    let scale = p.out_scale();
    surrogate(x, p).map(|e| scale * e)
}

/// Scalar version of [`surrogate_dequant`].
pub fn surrogate_dequant_at<T: Real>(x: T, p: &QuantParams<T>) -> T {
    p.out_scale() * surrogate_at(x, p)
}

/// Per-element derivative of the expected code w.r.t. the scaled input:
/// `1 / a_i` inside segment `i`, zero in the saturated regions.
pub fn surrogate_slope<T: Real>(x: &Tensor<T>, p: &QuantParams<T>) -> Tensor<T> {
    let d = p.endpoints();
    x.map(|v| match backward_segment(p.beta1 * v, &d) {
        Segment::Interior(i) => T::one() / p.widths[i - 1],
        _ => T::zero(),
    })
}

/// Gradients of the raw expected code (no output scaling, no input-scale
/// chain) with parameter gradients reduced by summation over elements.
#[derive(Clone, Debug)]
pub struct CodeGrads<T> {
    /// dE/dx' per element, times the upstream weight.
    pub input: Tensor<T>,
    pub widths: Vec<T>,
    pub start: T,
}

/// Full-chain gradients of the dequantized quantizer output
/// `beta2 * (2/(2^n-1)) * E(beta1 * x)` w.r.t. every learnable scalar and the
/// input. Parameter gradients are summed over all elements sharing the
/// quantizer.
#[derive(Clone, Debug)]
pub struct QuantGrads<T> {
    pub input: Tensor<T>,
    pub widths: Vec<T>,
    pub start: T,
    pub beta1: T,
    pub beta2: T,
}

fn check_upstream<T: Real>(x: &Tensor<T>, g_up: &Tensor<T>) -> Result<()> {
    if x.shape() != g_up.shape() {
        return Err(Error::shape("quantizer_backward", x.shape(), g_up.shape()));
    }
    Ok(())
}

/// G-STE gradients of the raw code surrogate. Per element in segment `i`:
/// slope `1/a_i`; `dE/da_i = -(x'-d_{i-1})/a_i^2`; `dE/da_k = -1/a_i` for
/// every earlier `k < i`; `dE/ds = -1/a_i`. Zero everywhere outside the
/// segments.
pub fn code_backward<T: Real>(
    x: &Tensor<T>,
    p: &QuantParams<T>,
    g_up: &Tensor<T>,
) -> Result<CodeGrads<T>> {
    check_upstream(x, g_up)?;
    let d = p.endpoints();
    let mut input = vec![T::zero(); x.numel()];
    let mut widths = vec![T::zero(); p.intervals()];
    let mut start = T::zero();
    for (e, (&v, &g)) in x.data().iter().zip(g_up.data().iter()).enumerate() {
        let xp = p.beta1 * v;
        if let Segment::Interior(i) = backward_segment(xp, &d) {
            let w = p.widths[i - 1];
            let slope = T::one() / w;
            input[e] = g * slope;
            start -= g * slope;
            widths[i - 1] -= g * (xp - d[i - 1]) / (w * w);
            for earlier in widths.iter_mut().take(i - 1) {
                *earlier -= g * slope;
            }
        }
    }
    Ok(CodeGrads {
        input: Tensor::new(x.shape().to_vec(), input)?,
        widths,
        start,
    })
}

/// G-STE gradients through the full forward chain, including the input scale
/// `beta1` and the output scaling `out_scale = beta2 * 2/(2^n-1)`. The
/// `beta2` gradient is taken through the surrogate (product rule on
/// `beta2 * (2/(2^n-1)) * E`), consistent with the finite-difference oracle.
pub fn quantizer_backward<T: Real>(
    x: &Tensor<T>,
    p: &QuantParams<T>,
    g_up: &Tensor<T>,
) -> Result<QuantGrads<T>> {
    let segments = segment_cache(x, p);
    quantizer_backward_cached(x, p, g_up, &segments)
}

/// [`quantizer_backward`] with the per-element segment indices already
/// cached at forward time, making the backward O(1) per element.
pub fn quantizer_backward_cached<T: Real>(
    x: &Tensor<T>,
    p: &QuantParams<T>,
    g_up: &Tensor<T>,
    segments: &Tensor<T>,
) -> Result<QuantGrads<T>> {
    check_upstream(x, g_up)?;
    if segments.shape() != x.shape() {
        return Err(Error::contract(
            "segment cache does not match the forward input",
        ));
    }
    let d = p.endpoints();
    let last = d.len() - 1;
    let level_step = T::from_f64(2.0 / (p.levels() - 1) as f64);
    let oscale = p.beta2 * level_step;
    let mut input = vec![T::zero(); x.numel()];
    let mut widths = vec![T::zero(); p.intervals()];
    let mut start = T::zero();
    let mut beta1 = T::zero();
    let mut beta2 = T::zero();
    for (e, (&v, &g)) in x.data().iter().zip(g_up.data().iter()).enumerate() {
        let xp = p.beta1 * v;
        match decode_segment(segments.data()[e].as_f64(), last) {
            Segment::Interior(i) => {
                let w = p.widths[i - 1];
                let slope = T::one() / w;
                let gsl = g * oscale * slope;
                input[e] = gsl * p.beta1;
                beta1 += gsl * v;
                start -= gsl;
                widths[i - 1] -= g * oscale * (xp - d[i - 1]) / (w * w);
                for earlier in widths.iter_mut().take(i - 1) {
                    *earlier -= gsl;
                }
                // E on segment i; equals the scan value everywhere
                beta2 += g * level_step
                    * ((xp - d[i - 1]) / w + T::from_f64((i - 1) as f64));
            }
            Segment::Below => {}
            Segment::Above => {
                beta2 += g * level_step * T::from_f64(last as f64);
            }
        }
    }
    Ok(QuantGrads {
        input: Tensor::new(x.shape().to_vec(), input)?,
        widths,
        start,
        beta1,
        beta2,
    })
}

// ── Graph node ───────────────────────────────────────────────────────

/// Custom-gradient graph node wrapping the quantizer. Inputs, in order:
/// `[x, start, widths, beta1, beta2]` (`start`/`beta1`/`beta2` rank-0,
/// `widths` rank-1). In `Exact` mode the forward emits the dequantized hard
/// codes; in `Surrogate` mode it emits the scaled expectation, whose true
/// gradient is exactly what the backward computes in either mode.
#[derive(Debug)]
pub struct ActQuantNode {
    pub n: u32,
    pub mode: QuantMode,
}

fn params_from_inputs<T: Real>(n: u32, inputs: &[&Tensor<T>]) -> Result<QuantParams<T>> {
    if inputs.len() != 5 {
        return Err(Error::contract(format!(
            "activation quantizer node takes 5 inputs, got {}",
            inputs.len()
        )));
    }
    QuantParams::new(
        n,
        inputs[1].scalar_value()?,
        inputs[2].data().to_vec(),
        inputs[3].scalar_value()?,
        inputs[4].scalar_value()?,
    )
}

impl<T: Real> CustomOp<T> for ActQuantNode {
    fn name(&self) -> &'static str {
        "act-quant"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let p = params_from_inputs(self.n, inputs)?;
        let out = match self.mode {
            QuantMode::Exact => quantize_forward(inputs[0], &p)?.dequantize(),
            QuantMode::Surrogate => surrogate_dequant(inputs[0], &p),
        };
        Ok((out, vec![segment_cache(inputs[0], &p)]))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        saved: &[Tensor<T>],
        upstream: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let p = params_from_inputs(self.n, inputs)?;
        // cached segment indices from forward; recomputation is the fallback
        let grads = match saved.first() {
            Some(segments) => quantizer_backward_cached(inputs[0], &p, upstream, segments)?,
            None => quantizer_backward(inputs[0], &p, upstream)?,
        };
        Ok(vec![
            Some(grads.input),
            Some(Tensor::scalar(grads.start)),
            Some(Tensor::from_slice(&grads.widths)),
            Some(Tensor::scalar(grads.beta1)),
            Some(Tensor::scalar(grads.beta2)),
        ])
    }
}

// ── Strategy family ──────────────────────────────────────────────────

/// One interchangeable activation-quantization strategy. The two variants
/// share the threshold machinery; they differ in whether the threshold
/// parameters receive gradient updates.
pub trait ActScheme<T: Real>: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether `s`, `a_i`, `beta1`, `beta2` train. When false the quantizer
    /// stays at its default equidistant initialization and the backward
    /// degenerates to the classic straight-through estimator.
    fn learnable(&self) -> bool;

    fn init(&self, n: u32) -> Result<QuantParams<T>> {
        QuantParams::defaults(n)
    }

    /// Learnable scalars the strategy adds per layer.
    fn scalar_count(&self, n: u32) -> usize {
        if self.learnable() {
            (1usize << n) + 2
        } else {
            0
        }
    }
}

/// Learnable-threshold quantizer trained with G-STE.
#[derive(Debug)]
pub struct N2uqAct;

impl<T: Real> ActScheme<T> for N2uqAct {
    fn name(&self) -> &'static str {
        "n2uq"
    }
    fn learnable(&self) -> bool {
        true
    }
}

/// Fixed-threshold uniform baseline: default equidistant parameters, frozen.
#[derive(Debug)]
pub struct UniformAct;

impl<T: Real> ActScheme<T> for UniformAct {
    fn name(&self) -> &'static str {
        "uniform"
    }
    fn learnable(&self) -> bool {
        false
    }
}

pub type ArcActScheme<T> = Arc<dyn ActScheme<T>>;
