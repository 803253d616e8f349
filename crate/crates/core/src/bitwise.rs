//! Bit-serial execution of quantized layers.
//!
//! Quantized codes are decomposed into bit planes and the integer dot product
//! of two code vectors is computed exactly as
//! `sum_{i,j} 2^(i+j) * popcount(and(a_i, w_j))`. Because the activation
//! codes are unsigned with zero offset while weight levels are the affine map
//! `w^q = s_w * c_w - 1`, one popcount-derived correction term (the sum of
//! the activation codes) bridges the unsigned arithmetic to the signed real
//! dot product; the inner loop stays pure AND + popcount.

use crate::error::{Error, Result};
use crate::quant::act::ActivationCodes;
use crate::quant::weight::QuantizedWeights;
use crate::tensor::{Real, Tensor};

/// Unsigned quantization codes plus the affine metadata that reads a code
/// back as a real level (`value = scale * code + offset`).
#[derive(Clone, Debug, PartialEq)]
pub struct CodeTensor<T> {
    pub codes: Vec<u32>,
    pub shape: Vec<usize>,
    pub bit_width: u32,
    pub scale: T,
    pub offset: T,
}

impl<T: Real> CodeTensor<T> {
    pub fn dequantize(&self) -> Result<Tensor<T>> {
        let data = self
            .codes
            .iter()
            .map(|&c| self.scale * T::from_f64(c as f64) + self.offset)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

impl<T: Real> From<&ActivationCodes<T>> for CodeTensor<T> {
    fn from(a: &ActivationCodes<T>) -> Self {
        Self {
            codes: a.codes().to_vec(),
            shape: a.shape().to_vec(),
            bit_width: a.n(),
            scale: a.out_scale(),
            offset: T::zero(),
        }
    }
}

impl<T: Real> From<&QuantizedWeights<T>> for CodeTensor<T> {
    fn from(w: &QuantizedWeights<T>) -> Self {
        Self {
            codes: w.codes().to_vec(),
            shape: w.shape().to_vec(),
            bit_width: w.n(),
            scale: w.scale(),
            offset: w.offset(),
        }
    }
}

const WORD_BITS: usize = 64;

/// Bit-plane decomposition of a code vector: plane `i` holds bit `i` of every
/// code, packed into 64-bit words with zero-padded tails.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitPlanes {
    planes: Vec<Vec<u64>>,
    len: usize,
    bit_width: u32,
}

impl BitPlanes {
    /// Packs codes into planes; every code must fit in `bit_width` bits.
    pub fn pack(codes: &[u32], bit_width: u32) -> Result<Self> {
        if !(1..=16).contains(&bit_width) {
            return Err(Error::contract(format!("bit width {bit_width} outside 1..=16")));
        }
        let limit = (1u32 << bit_width) - 1;
        let words = codes.len().div_ceil(WORD_BITS);
        let mut planes = vec![vec![0u64; words]; bit_width as usize];
        for (e, &code) in codes.iter().enumerate() {
            if code > limit {
                return Err(Error::contract(format!(
                    "code {code} overflows {bit_width}-bit planes"
                )));
            }
            for (b, plane) in planes.iter_mut().enumerate() {
                if (code >> b) & 1 == 1 {
                    plane[e / WORD_BITS] |= 1u64 << (e % WORD_BITS);
                }
            }
        }
        Ok(Self { planes, len: codes.len(), bit_width })
    }

    /// Rebuilds planes from raw packed words (container loading). Padding
    /// bits past `len` must be zero.
    pub fn from_words(planes: Vec<Vec<u64>>, len: usize, bit_width: u32) -> Result<Self> {
        if planes.len() != bit_width as usize {
            return Err(Error::contract(format!(
                "{} planes for bit width {bit_width}",
                planes.len()
            )));
        }
        let words = len.div_ceil(WORD_BITS);
        for plane in &planes {
            if plane.len() != words {
                return Err(Error::contract(format!(
                    "plane has {} words, expected {words}",
                    plane.len()
                )));
            }
            if !len.is_multiple_of(WORD_BITS) {
                if let Some(tail) = plane.last() {
                    if tail >> (len % WORD_BITS) != 0 {
                        return Err(Error::contract("nonzero padding bits past logical length"));
                    }
                }
            }
        }
        Ok(Self { planes, len, bit_width })
    }

    /// Reconstructs the original codes (`sum_i plane_i * 2^i`).
    pub fn unpack(&self) -> Vec<u32> {
        let mut codes = vec![0u32; self.len];
        for (b, plane) in self.planes.iter().enumerate() {
            for (e, code) in codes.iter_mut().enumerate() {
                *code |= (((plane[e / WORD_BITS] >> (e % WORD_BITS)) & 1) as u32) << b;
            }
        }
        codes
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bit_width(&self) -> u32 {
        self.bit_width
    }

    pub fn plane(&self, i: usize) -> &[u64] {
        &self.planes[i]
    }

    /// Sum of all packed codes, computed from popcounts:
    /// `sum_i 2^i * popcount(plane_i)`.
    pub fn code_sum(&self) -> u64 {
        self.planes
            .iter()
            .enumerate()
            .map(|(b, plane)| {
                (plane.iter().map(|w| w.count_ones() as u64).sum::<u64>()) << b
            })
            .sum()
    }
}

/// Exact integer dot product of two code vectors via AND + popcount:
/// `sum_{i,j} 2^(i+j) * popcount(and(a_i, w_j))`.
pub fn popcount_dot(a: &BitPlanes, b: &BitPlanes) -> Result<u64> {
    if a.len != b.len {
        return Err(Error::contract(format!(
            "popcount_dot: lengths {} and {} differ",
            a.len, b.len
        )));
    }
    let mut acc = 0u64;
    for (i, pa) in a.planes.iter().enumerate() {
        for (j, pb) in b.planes.iter().enumerate() {
            let mut count = 0u64;
            for (wa, wb) in pa.iter().zip(pb.iter()) {
                count += (wa & wb).count_ones() as u64;
            }
            acc += count << (i + j);
        }
    }
    Ok(acc)
}

/// A linear layer packed for bit-serial inference: per-output-row weight
/// planes, the affine scales on both operands, and precomputed per-row code
/// sums.
#[derive(Clone, Debug)]
pub struct QuantLinearPacked<T> {
    rows: Vec<BitPlanes>,
    row_code_sums: Vec<u64>,
    m_bits: u32,
    k_bits: u32,
    out_dim: usize,
    in_dim: usize,
    w_scale: T,
    w_offset: T,
    act_scale: T,
    bias: Option<Vec<T>>,
}

impl<T: Real> QuantLinearPacked<T> {
    /// Packs rank-2 weight codes `[out, in]`. `m_bits` is the bit width of
    /// the activations this layer will consume and `act_scale` their
    /// dequantization factor.
    pub fn new(
        weights: &CodeTensor<T>,
        m_bits: u32,
        act_scale: T,
        bias: Option<Vec<T>>,
    ) -> Result<Self> {
        if weights.shape.len() != 2 {
            return Err(Error::contract(format!(
                "packed layer expects rank-2 weight codes, got shape {:?}",
                weights.shape
            )));
        }
        let (out_dim, in_dim) = (weights.shape[0], weights.shape[1]);
        if let Some(b) = &bias {
            if b.len() != out_dim {
                return Err(Error::contract(format!(
                    "bias length {} does not match {out_dim} output rows",
                    b.len()
                )));
            }
        }
        let mut rows = Vec::with_capacity(out_dim);
        let mut row_code_sums = Vec::with_capacity(out_dim);
        for r in 0..out_dim {
            let planes =
                BitPlanes::pack(&weights.codes[r * in_dim..(r + 1) * in_dim], weights.bit_width)?;
            row_code_sums.push(planes.code_sum());
            rows.push(planes);
        }
        Ok(Self {
            rows,
            row_code_sums,
            m_bits,
            k_bits: weights.bit_width,
            out_dim,
            in_dim,
            w_scale: weights.scale,
            w_offset: weights.offset,
            act_scale,
            bias,
        })
    }

    /// Reassembles a packed layer from container fields; per-row code sums
    /// are recomputed.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        rows: Vec<BitPlanes>,
        m_bits: u32,
        k_bits: u32,
        in_dim: usize,
        w_scale: T,
        w_offset: T,
        act_scale: T,
        bias: Option<Vec<T>>,
    ) -> Result<Self> {
        for row in &rows {
            if row.len() != in_dim || row.bit_width() != k_bits {
                return Err(Error::contract("packed row does not match layer dims"));
            }
        }
        let row_code_sums = rows.iter().map(BitPlanes::code_sum).collect();
        let out_dim = rows.len();
        if let Some(b) = &bias {
            if b.len() != out_dim {
                return Err(Error::contract("bias length mismatch"));
            }
        }
        Ok(Self {
            rows,
            row_code_sums,
            m_bits,
            k_bits,
            out_dim,
            in_dim,
            w_scale,
            w_offset,
            act_scale,
            bias,
        })
    }

    /// Replaces the folded bias (container loading attaches it after the
    /// plane block).
    pub fn with_bias(mut self, bias: Option<Vec<T>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != self.out_dim {
                return Err(Error::contract("bias length mismatch"));
            }
        }
        self.bias = bias;
        Ok(self)
    }

    /// Dequantized weight matrix `[out, in]` (fallback path when the
    /// incoming activations are not quantized).
    pub fn dequantize_weights(&self) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(self.out_dim * self.in_dim);
        for row in &self.rows {
            for code in row.unpack() {
                data.push(self.w_scale * T::from_f64(code as f64) + self.w_offset);
            }
        }
        Tensor::new(vec![self.out_dim, self.in_dim], data)
    }

    /// Same layer at another precision (integer planes are shared exactly).
    pub fn cast<U: Real>(&self) -> QuantLinearPacked<U> {
        QuantLinearPacked {
            rows: self.rows.clone(),
            row_code_sums: self.row_code_sums.clone(),
            m_bits: self.m_bits,
            k_bits: self.k_bits,
            out_dim: self.out_dim,
            in_dim: self.in_dim,
            w_scale: U::from_f64(self.w_scale.as_f64()),
            w_offset: U::from_f64(self.w_offset.as_f64()),
            act_scale: U::from_f64(self.act_scale.as_f64()),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|&v| U::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn m_bits(&self) -> u32 {
        self.m_bits
    }

    pub fn k_bits(&self) -> u32 {
        self.k_bits
    }

    pub fn w_scale(&self) -> T {
        self.w_scale
    }

    pub fn w_offset(&self) -> T {
        self.w_offset
    }

    pub fn act_scale(&self) -> T {
        self.act_scale
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn row(&self, r: usize) -> &BitPlanes {
        &self.rows[r]
    }

    pub fn row_code_sums(&self) -> &[u64] {
        &self.row_code_sums
    }

    /// Real-valued dot product of packed activations against one weight row:
    /// `s_a * s_w * popcount_dot + s_a * o_w * sum(activation codes)`,
    /// exactly the dequantized dot product of the two code vectors.
    pub fn dot_real(&self, acts: &BitPlanes, acts_code_sum: u64, row: usize) -> Result<T> {
        let integer = popcount_dot(acts, &self.rows[row])?;
        let main = self.act_scale * self.w_scale * T::from_f64(integer as f64);
        let correction = self.act_scale * self.w_offset * T::from_f64(acts_code_sum as f64);
        Ok(main + correction)
    }

    /// Bit-serial forward pass over a batch of activation code rows
    /// (`[batch, in]`), plus bias.
    pub fn infer(&self, x: &CodeTensor<T>) -> Result<Tensor<T>> {
        if x.bit_width != self.m_bits {
            return Err(Error::contract(format!(
                "activation bit width {} does not match layer M = {}",
                x.bit_width, self.m_bits
            )));
        }
        if x.offset != T::zero() {
            return Err(Error::contract(
                "packed inference expects zero-offset activation codes",
            ));
        }
        if x.shape.len() != 2 || x.shape[1] != self.in_dim {
            return Err(Error::shape("infer_linear", &x.shape, &[self.out_dim, self.in_dim]));
        }
        let batch = x.shape[0];
        let mut out = Vec::with_capacity(batch * self.out_dim);
        for b in 0..batch {
            let acts = BitPlanes::pack(&x.codes[b * self.in_dim..(b + 1) * self.in_dim], self.m_bits)?;
            let sum = acts.code_sum();
            for r in 0..self.out_dim {
                let mut v = self.dot_real(&acts, sum, r)?;
                if let Some(bias) = &self.bias {
                    v += bias[r];
                }
                out.push(v);
            }
        }
        Tensor::new(vec![batch, self.out_dim], out)
    }
}
