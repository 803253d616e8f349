//! Weight quantization: fixed equidistant thresholds behind interchangeable
//! rescaling schemes.
//!
//! The quantization function is shared by every scheme:
//! `codes = round((clip(w', -1, 1) + 1) * (2^n - 1) / 2)` with dequantization
//! `w^q = codes * 2/(2^n - 1) - 1`, i.e. `2^n` equidistant levels spanning
//! `[-1, 1]`. Rounding ties are broken half-away-from-zero on the shifted
//! nonnegative domain (`k + 0.5` rounds to `k + 1`).
//!
//! What differs per scheme is how raw weights are rescaled into the clip
//! domain before quantization:
//!
//! * `entropy` — per-filter statistic `(2^(n-1)/(2^n-1)) * count / l1-norm`,
//!   which drives the quantized-level occupancy toward uniform (maximal
//!   Shannon entropy). Uniformly distributed weights land within one rounding
//!   cell of exactly equal occupancy.
//! * `tanh-max` — `tanh(w) / max|tanh(w)|`, the classic comparator; extrema
//!   dominate the scale and starve the outer levels.
//! * `weight-norm` — per-filter unit L2 norm.
//! * `learned-scale` — one trainable scalar multiplier per layer.
//!
//! All rescale statistics are treated as constants of the step in backward
//! (the gradient passes through the clip STE and the frozen factor only);
//! the learned-scale multiplier is the exception and receives a product-rule
//! gradient.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::CustomOp;
use crate::quant::QuantMode;
use crate::tensor::{Real, Tensor};

/// One layer's real-valued weights paired with the target bit-width.
#[derive(Clone, Debug)]
pub struct WeightFilter<T> {
    pub tensor: Tensor<T>,
    pub n: u32,
}

impl<T: Real> WeightFilter<T> {
    pub fn new(tensor: Tensor<T>, n: u32) -> Result<Self> {
        if tensor.numel() == 0 {
            return Err(Error::contract("weight filter must be nonempty"));
        }
        if !tensor.all_finite() {
            return Err(Error::contract("weight filter contains non-finite entries"));
        }
        if !(1..=8).contains(&n) {
            return Err(Error::contract(format!("weight bit-width {n} outside 1..=8")));
        }
        Ok(Self { tensor, n })
    }
}

/// Quantized weight codes plus the affine map back to real levels:
/// `w^q = scale * code + offset` with `scale = 2/(2^n-1)`, `offset = -1`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeights<T> {
    codes: Vec<u32>,
    shape: Vec<usize>,
    n: u32,
    scale: T,
    offset: T,
}

impl<T: Real> QuantizedWeights<T> {
    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn offset(&self) -> T {
        self.offset
    }

    pub fn dequantize(&self) -> Tensor<T> {
        let data = self
            .codes
            .iter()
            .map(|&c| self.scale * T::from_f64(c as f64) + self.offset)
            .collect();
        Tensor::new(self.shape.clone(), data).expect("codes carry their own shape")
    }

    /// Occupancy count per quantization level (length `2^n`).
    pub fn level_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; 1 << self.n];
        for &c in &self.codes {
            hist[c as usize] += 1;
        }
        hist
    }
}

/// Fixed equidistant quantization of clip-domain values.
pub fn fq_quantize<T: Real>(scaled: &Tensor<T>, n: u32) -> Result<QuantizedWeights<T>> {
    if !(1..=8).contains(&n) {
        return Err(Error::contract(format!("weight bit-width {n} outside 1..=8")));
    }
    let half_levels = T::from_f64(((1usize << n) - 1) as f64 / 2.0);
    let codes = scaled
        .data()
        .iter()
        .map(|&w| {
            let clipped = w.max(-T::one()).min(T::one());
            ((clipped + T::one()) * half_levels).round().as_f64() as u32
        })
        .collect();
    Ok(QuantizedWeights {
        codes,
        shape: scaled.shape().to_vec(),
        n,
        scale: T::from_f64(2.0 / ((1usize << n) - 1) as f64),
        offset: -T::one(),
    })
}

/// Shannon entropy (bits) of the empirical level occupancy. Maximal value is
/// `n` bits, attained at uniform occupancy `1/2^n`.
pub fn entropy_bits<T: Real>(q: &QuantizedWeights<T>) -> f64 {
    let hist = q.level_histogram();
    let total = q.codes.len() as f64;
    let mut h = 0.0;
    for &count in &hist {
        if count > 0 {
            let p = count as f64 / total;
            h -= p * p.log2();
        }
    }
    h
}

fn kahan_abs_sum<T: Real>(values: &[T]) -> T {
    let mut sum = T::zero();
    let mut carry = T::zero();
    for &v in values {
        let y = v.abs() - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    sum
}

fn filter_layout(shape: &[usize], numel: usize) -> (usize, usize) {
    if shape.len() == 2 {
        (shape[0], shape[1])
    } else {
        (1, numel)
    }
}

/// Entropy-preserving rescale: per output-channel filter,
/// `w' = (2^(n-1)/(2^n-1)) * (count / l1) * w`, so `mean|w'|` equals
/// `2^(n-1)/(2^n-1)` by construction and is invariant to the scale of `w`.
pub fn regularize<T: Real>(wf: &WeightFilter<T>) -> Result<Tensor<T>> {
    let (filters, len) = filter_layout(wf.tensor.shape(), wf.tensor.numel());
    let target = T::from_f64((1u64 << (wf.n - 1)) as f64 / ((1u64 << wf.n) - 1) as f64);
    let mut out = wf.tensor.data().to_vec();
    for f in 0..filters {
        let chunk = &mut out[f * len..(f + 1) * len];
        let l1 = kahan_abs_sum(chunk);
        if l1 == T::zero() {
            return Err(Error::DegenerateInput(format!(
                "filter {f} is all-zero; entropy rescale undefined"
            )));
        }
        let factor = target * T::from_f64(len as f64) / l1;
        for v in chunk.iter_mut() {
            *v *= factor;
        }
    }
    Tensor::new(wf.tensor.shape().to_vec(), out)
}

/// Forward context of one rescale: the clip-domain values, the frozen
/// per-filter multiplier, and an optional extra elementwise factor
/// (tanh-max saves `1 - tanh(w)^2` here).
#[derive(Clone, Debug)]
pub struct Rescaled<T> {
    pub scaled: Tensor<T>,
    pub per_filter: Vec<T>,
    pub per_elem: Option<Tensor<T>>,
}

impl<T: Real> Rescaled<T> {
    fn filter_len(&self) -> usize {
        self.scaled.numel() / self.per_filter.len()
    }
}

/// Straight-through backward of the shared quantizer: the upstream gradient
/// passes where `|w'| <= 1`, is zeroed where the clip saturated, and is
/// scaled by the frozen rescale factors saved at forward time.
pub fn weight_backward<T: Real>(g_up: &Tensor<T>, ctx: &Rescaled<T>) -> Result<Tensor<T>> {
    if g_up.shape() != ctx.scaled.shape() {
        return Err(Error::shape("weight_backward", g_up.shape(), ctx.scaled.shape()));
    }
    let len = ctx.filter_len();
    let mut out = Vec::with_capacity(g_up.numel());
    for (e, (&g, &w)) in g_up.data().iter().zip(ctx.scaled.data().iter()).enumerate() {
        let mut v = if w.abs() <= T::one() { g } else { T::zero() };
        v *= ctx.per_filter[e / len];
        if let Some(extra) = &ctx.per_elem {
            v *= extra.data()[e];
        }
        out.push(v);
    }
    Tensor::new(g_up.shape().to_vec(), out)
}

// ── Strategy family ──────────────────────────────────────────────────

/// One interchangeable pre-quantization rescaling scheme.
pub trait WeightScheme<T: Real>: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Trainable scalars the scheme adds per layer.
    fn learnable_scalars(&self) -> usize {
        0
    }

    /// Initial values for the scheme's trainable scalars.
    fn init_scalars(&self, _w: &Tensor<T>, _n: u32) -> Result<Vec<T>> {
        Ok(vec![])
    }

    /// Maps raw weights into the clip domain, saving backward context.
    fn rescale(&self, w: &Tensor<T>, scalars: &[T], n: u32) -> Result<Rescaled<T>>;

    /// Gradient of the rescale given the upstream already masked by the clip
    /// STE. Returns `(grad_weights, grad_scalars)`.
    fn backward(
        &self,
        ctx: &Rescaled<T>,
        w: &Tensor<T>,
        scalars: &[T],
        masked_up: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<T>)>;

    /// One-shot forward to quantized codes.
    fn quantize(&self, w: &Tensor<T>, scalars: &[T], n: u32) -> Result<QuantizedWeights<T>> {
        fq_quantize(&self.rescale(w, scalars, n)?.scaled, n)
    }
}

fn frozen_factor_backward<T: Real>(
    ctx: &Rescaled<T>,
    masked_up: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let len = ctx.filter_len();
    let mut out = Vec::with_capacity(masked_up.numel());
    for (e, &g) in masked_up.data().iter().enumerate() {
        let mut v = g * ctx.per_filter[e / len];
        if let Some(extra) = &ctx.per_elem {
            v *= extra.data()[e];
        }
        out.push(v);
    }
    Ok((Tensor::new(masked_up.shape().to_vec(), out)?, vec![]))
}

/// Entropy-preserving per-filter rescale (the default scheme).
#[derive(Debug)]
pub struct EntropyScheme;

impl<T: Real> WeightScheme<T> for EntropyScheme {
    fn name(&self) -> &'static str {
        "entropy"
    }

    fn rescale(&self, w: &Tensor<T>, _scalars: &[T], n: u32) -> Result<Rescaled<T>> {
        let (filters, len) = filter_layout(w.shape(), w.numel());
        let target = T::from_f64((1u64 << (n - 1)) as f64 / ((1u64 << n) - 1) as f64);
        let mut per_filter = Vec::with_capacity(filters);
        for f in 0..filters {
            let l1 = kahan_abs_sum(&w.data()[f * len..(f + 1) * len]);
            if l1 == T::zero() {
                return Err(Error::DegenerateInput(format!(
                    "filter {f} is all-zero; entropy rescale undefined"
                )));
            }
            per_filter.push(target * T::from_f64(len as f64) / l1);
        }
        let mut data = w.data().to_vec();
        for (e, v) in data.iter_mut().enumerate() {
            *v *= per_filter[e / len];
        }
        Ok(Rescaled {
            scaled: Tensor::new(w.shape().to_vec(), data)?,
            per_filter,
            per_elem: None,
        })
    }

    fn backward(
        &self,
        ctx: &Rescaled<T>,
        _w: &Tensor<T>,
        _scalars: &[T],
        masked_up: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<T>)> {
        frozen_factor_backward(ctx, masked_up)
    }
}

/// `tanh(w) / max|tanh(w)|` comparator. The max is taken over the whole
/// layer and frozen in backward; the tanh derivative is kept.
#[derive(Debug)]
pub struct TanhMaxScheme;

impl<T: Real> WeightScheme<T> for TanhMaxScheme {
    fn name(&self) -> &'static str {
        "tanh-max"
    }

    fn rescale(&self, w: &Tensor<T>, _scalars: &[T], _n: u32) -> Result<Rescaled<T>> {
        let t = w.map(|v| v.tanh());
        let max = t.data().iter().fold(T::zero(), |m, &v| m.max(v.abs()));
        if max == T::zero() {
            return Err(Error::DegenerateInput(
                "all-zero weights; tanh/max rescale undefined".into(),
            ));
        }
        let inv = T::one() / max;
        let scaled = t.map(|v| v * inv);
        let sech2 = w.map(|v| {
            let th = v.tanh();
            T::one() - th * th
        });
        Ok(Rescaled {
            scaled,
            per_filter: vec![inv],
            per_elem: Some(sech2),
        })
    }

    fn backward(
        &self,
        ctx: &Rescaled<T>,
        _w: &Tensor<T>,
        _scalars: &[T],
        masked_up: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<T>)> {
        frozen_factor_backward(ctx, masked_up)
    }
}

/// Per-filter unit L2 norm comparator; the norm is frozen in backward.
#[derive(Debug)]
pub struct WeightNormScheme;

impl<T: Real> WeightScheme<T> for WeightNormScheme {
    fn name(&self) -> &'static str {
        "weight-norm"
    }

    fn rescale(&self, w: &Tensor<T>, _scalars: &[T], _n: u32) -> Result<Rescaled<T>> {
        let (filters, len) = filter_layout(w.shape(), w.numel());
        let mut per_filter = Vec::with_capacity(filters);
        for f in 0..filters {
            let chunk = &w.data()[f * len..(f + 1) * len];
            let mut sq = T::zero();
            for &v in chunk {
                sq += v * v;
            }
            let norm = sq.sqrt();
            if norm == T::zero() {
                return Err(Error::DegenerateInput(format!(
                    "filter {f} has zero norm; weight-norm rescale undefined"
                )));
            }
            per_filter.push(T::one() / norm);
        }
        let mut data = w.data().to_vec();
        for (e, v) in data.iter_mut().enumerate() {
            *v *= per_filter[e / len];
        }
        Ok(Rescaled {
            scaled: Tensor::new(w.shape().to_vec(), data)?,
            per_filter,
            per_elem: None,
        })
    }

    fn backward(
        &self,
        ctx: &Rescaled<T>,
        _w: &Tensor<T>,
        _scalars: &[T],
        masked_up: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<T>)> {
        frozen_factor_backward(ctx, masked_up)
    }
}

/// One trainable scalar multiplier per layer, initialized so the initial
/// rescale matches the entropy statistic, then trained by gradient.
#[derive(Debug)]
pub struct LearnedScaleScheme;

impl<T: Real> WeightScheme<T> for LearnedScaleScheme {
    fn name(&self) -> &'static str {
        "learned-scale"
    }

    fn learnable_scalars(&self) -> usize {
        1
    }

    fn init_scalars(&self, w: &Tensor<T>, n: u32) -> Result<Vec<T>> {
        let l1 = kahan_abs_sum(w.data());
        if l1 == T::zero() {
            return Err(Error::DegenerateInput(
                "all-zero weights; learned-scale initialization undefined".into(),
            ));
        }
        let target = T::from_f64((1u64 << (n - 1)) as f64 / ((1u64 << n) - 1) as f64);
        Ok(vec![target * T::from_f64(w.numel() as f64) / l1])
    }

    fn rescale(&self, w: &Tensor<T>, scalars: &[T], _n: u32) -> Result<Rescaled<T>> {
        if scalars.len() != 1 {
            return Err(Error::contract("learned-scale expects exactly one scalar"));
        }
        let gamma = scalars[0];
        Ok(Rescaled {
            scaled: w.map(|v| v * gamma),
            per_filter: vec![gamma],
            per_elem: None,
        })
    }

    fn backward(
        &self,
        ctx: &Rescaled<T>,
        w: &Tensor<T>,
        scalars: &[T],
        masked_up: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<T>)> {
        let (gw, _) = frozen_factor_backward(ctx, masked_up)?;
        let _ = scalars;
        let mut ggamma = T::zero();
        for (&g, &v) in masked_up.data().iter().zip(w.data().iter()) {
            ggamma += g * v;
        }
        Ok((gw, vec![ggamma]))
    }
}

// ── Spec-level one-shot operations ───────────────────────────────────

/// DoReFa-style comparator: `tanh(w) / max|tanh(w)|` then the fixed quantizer.
pub fn baseline_tanh_max<T: Real>(wf: &WeightFilter<T>) -> Result<QuantizedWeights<T>> {
    TanhMaxScheme.quantize(&wf.tensor, &[], wf.n)
}

/// Unit-L2-norm comparator.
pub fn baseline_weight_norm<T: Real>(wf: &WeightFilter<T>) -> Result<QuantizedWeights<T>> {
    WeightNormScheme.quantize(&wf.tensor, &[], wf.n)
}

/// Trainable-scalar comparator evaluated at a given multiplier value.
pub fn baseline_learned_scale<T: Real>(wf: &WeightFilter<T>, gamma: T) -> Result<QuantizedWeights<T>> {
    LearnedScaleScheme.quantize(&wf.tensor, &[gamma], wf.n)
}

/// Entropy rescale followed by the fixed quantizer (the default path).
pub fn entropy_quantize<T: Real>(wf: &WeightFilter<T>) -> Result<QuantizedWeights<T>> {
    fq_quantize(&regularize(wf)?, wf.n)
}

// ── Graph node ───────────────────────────────────────────────────────

/// Custom-gradient graph node for quantized weights. Inputs: `[w]`, or
/// `[w, scalars]` when the scheme trains extra scalars. `Exact` mode emits
/// the dequantized codes; `Surrogate` mode emits `clip(w', -1, 1)`, the
/// function the STE backward actually differentiates.
pub struct WeightQuantNode<T: Real> {
    pub scheme: Arc<dyn WeightScheme<T>>,
    pub n: u32,
    pub mode: QuantMode,
}

impl<T: Real> fmt::Debug for WeightQuantNode<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WeightQuantNode({}, n={})", self.scheme.name(), self.n)
    }
}

impl<T: Real> WeightQuantNode<T> {
    fn split_inputs<'a>(&self, inputs: &[&'a Tensor<T>]) -> Result<(&'a Tensor<T>, Vec<T>)> {
        match inputs {
            [w] if self.scheme.learnable_scalars() == 0 => Ok((w, vec![])),
            [w, s] if s.numel() == self.scheme.learnable_scalars() => Ok((w, s.data().to_vec())),
            _ => Err(Error::contract(format!(
                "weight quantizer ({}) got {} inputs",
                self.scheme.name(),
                inputs.len()
            ))),
        }
    }
}

impl<T: Real> CustomOp<T> for WeightQuantNode<T> {
    fn name(&self) -> &'static str {
        "weight-quant"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let (w, scalars) = self.split_inputs(inputs)?;
        let ctx = self.scheme.rescale(w, &scalars, self.n)?;
        let out = match self.mode {
            QuantMode::Exact => fq_quantize(&ctx.scaled, self.n)?.dequantize(),
            QuantMode::Surrogate => ctx.scaled.map(|v| v.max(-T::one()).min(T::one())),
        };
        let mut saved = vec![ctx.scaled, Tensor::from_slice(&ctx.per_filter)];
        if let Some(extra) = ctx.per_elem {
            saved.push(extra);
        }
        Ok((out, saved))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        saved: &[Tensor<T>],
        upstream: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (w, scalars) = self.split_inputs(inputs)?;
        if saved.len() < 2 {
            return Err(Error::contract("weight quantizer backward before forward"));
        }
        let ctx = Rescaled {
            scaled: saved[0].clone(),
            per_filter: saved[1].data().to_vec(),
            per_elem: saved.get(2).cloned(),
        };
        let masked = upstream.zip(&ctx.scaled, "clip-mask", |g, wp| {
            if wp.abs() <= T::one() {
                g
            } else {
                T::zero()
            }
        })?;
        let (gw, gscalars) = self.scheme.backward(&ctx, w, &scalars, &masked)?;
        let mut out = vec![Some(gw)];
        if inputs.len() == 2 {
            out.push(Some(Tensor::from_slice(&gscalars)));
        }
        Ok(out)
    }
}
