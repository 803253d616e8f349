//! Packed-model container: the export format for bit-serial inference, plus
//! its runtime.
//!
//! Layout (all integers little-endian, reals 32-bit):
//!
//! ```text
//! magic "N2UQPACK" | version u32 | layer_count u32
//! per layer:
//!   kind u8 (0 linear, 1 conv3x3) | in_dim u32 | out_dim u32
//!   weight_tag u8:
//!     0 dense : fan_in u32, f32 x (out_dim * fan_in)
//!     1 packed: M u32, K u32, rows u32, fan_in u32, words_per_row u32,
//!               per row: K planes x words_per_row u64,
//!               w_scale f32, w_offset f32, act_scale f32
//!   bias f32 x out_dim
//!   act_tag u8: 0 none | 1: n_a u32, s f32, beta1 f32, beta2 f32,
//!                            widths f32 x (2^n_a - 1)
//!   rprelu_tag u8: 0 none | 1: channels u32, shift_in/slope/shift_out
//!                               f32 x channels each
//! trailer: input_rank u32, dims u32 x rank | num_classes u32
//! ```
//!
//! Writing is deterministic, so write -> read -> write round-trips
//! bit-exactly.

use std::fs;
use std::path::Path;

use crate::bitwise::{BitPlanes, CodeTensor, QuantLinearPacked};
use crate::error::{Error, Result};
use crate::graph::ConvShape;
use crate::nn::checkpoint::LeReader;
use crate::nn::data::Dataset;
use crate::nn::layers::{rprelu_eval, LayerKind, Network, RpReluParams};
use crate::nn::trainer::count_correct;
use crate::quant::act::{quantize_forward, QuantParams};
use crate::tensor::{matmul, transpose, Real, Tensor};

pub const PACK_MAGIC: &[u8; 8] = b"N2UQPACK";
pub const PACK_VERSION: u32 = 1;

/// Weight storage of one packed layer.
#[derive(Clone, Debug)]
pub enum PackedWeights<T: Real> {
    /// Full-precision matrix `[out, fan_in]`.
    Dense(Tensor<T>),
    /// Bit-plane weights for the popcount path.
    Packed(QuantLinearPacked<T>),
}

#[derive(Clone, Debug)]
pub struct PackedLayer<T: Real> {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: PackedWeights<T>,
    pub bias: Vec<T>,
    /// Quantizer applied to this layer's input activations.
    pub act_params: Option<QuantParams<T>>,
    pub rprelu: Option<RpReluParams<T>>,
}

/// A whole network in inference form.
#[derive(Clone, Debug)]
pub struct PackedNet<T: Real> {
    pub layers: Vec<PackedLayer<T>>,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

/// Converts a trained network into its packed inference form. Layers with
/// quantized weights and activations become bit-plane layers; everything
/// else stays dense.
pub fn pack_network<T: Real>(net: &Network<T>) -> Result<PackedNet<T>> {
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let act_params = layer
            .act
            .as_ref()
            .map(|a| a.to_quant(layer.spec.n_a))
            .transpose()?;
        let weights = match net.quantized_weights(i)? {
            Some(q) if act_params.is_some() => {
                let act_scale = act_params.as_ref().unwrap().out_scale();
                let ct = CodeTensor::from(&q);
                PackedWeights::Packed(QuantLinearPacked::new(
                    &ct,
                    layer.spec.n_a,
                    act_scale,
                    Some(layer.bias.data().to_vec()),
                )?)
            }
            // quantized weights without quantized activations cannot use the
            // popcount path; store their dequantized values densely
            Some(q) => PackedWeights::Dense(q.dequantize()),
            None => PackedWeights::Dense(layer.weight.clone()),
        };
        layers.push(PackedLayer {
            kind: layer.spec.kind,
            in_dim: layer.spec.in_dim,
            out_dim: layer.spec.out_dim,
            weights,
            bias: layer.bias.data().to_vec(),
            act_params,
            rprelu: layer.rprelu.clone(),
        });
    }
    Ok(PackedNet {
        layers,
        input_shape: net.input_shape.clone(),
        num_classes: net.num_classes,
    })
}

fn add_bias<T: Real>(x: &mut Tensor<T>, bias: &[T]) {
    let cols = *x.shape().last().unwrap();
    debug_assert_eq!(cols, bias.len());
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += bias[i % cols];
    }
}

/// Patch extraction on raw codes (zero padding is code 0, which dequantizes
/// to exactly zero for offset-free activations).
fn im2col_codes(codes: &[u32], conv: ConvShape) -> Vec<u32> {
    let ConvShape { batch, height, width, channels } = conv;
    let row_len = channels * 9;
    let mut out = vec![0u32; batch * height * width * row_len];
    for b in 0..batch {
        for y in 0..height {
            for x in 0..width {
                let row = (b * height + y) * width + x;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        let sx = x as isize + kx as isize - 1;
                        if sy < 0 || sy >= height as isize || sx < 0 || sx >= width as isize {
                            continue;
                        }
                        let src = ((b * height + sy as usize) * width + sx as usize) * channels;
                        for c in 0..channels {
                            out[row * row_len + c * 9 + ky * 3 + kx] = codes[src + c];
                        }
                    }
                }
            }
        }
    }
    out
}

impl<T: Real> PackedNet<T> {
    /// Pure-tensor forward pass to logits `[batch, classes]`.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut current = input.clone();
        for layer in &self.layers {
            let codes = layer
                .act_params
                .as_ref()
                .map(|p| quantize_forward(&current, p))
                .transpose()?;
            let mut out = match (&layer.weights, &codes) {
                (PackedWeights::Packed(gemm), Some(acts)) => {
                    // popcount path; gemm.infer folds the bias in
                    let ct = CodeTensor::from(acts);
                    match layer.kind {
                        LayerKind::Linear => {
                            let batch = ct.shape[0];
                            let flat: usize = ct.shape[1..].iter().product();
                            let flat_ct = CodeTensor { shape: vec![batch, flat], ..ct };
                            gemm.infer(&flat_ct)?
                        }
                        LayerKind::Conv3x3 => {
                            let s = &ct.shape;
                            if s.len() != 4 {
                                return Err(Error::contract(format!(
                                    "conv layer expects rank-4 activations, got {s:?}"
                                )));
                            }
                            let conv = ConvShape {
                                batch: s[0],
                                height: s[1],
                                width: s[2],
                                channels: s[3],
                            };
                            let col_codes = im2col_codes(&ct.codes, conv);
                            let cols = CodeTensor {
                                codes: col_codes,
                                shape: vec![
                                    conv.batch * conv.height * conv.width,
                                    conv.channels * 9,
                                ],
                                bit_width: ct.bit_width,
                                scale: ct.scale,
                                offset: ct.offset,
                            };
                            let flat = gemm.infer(&cols)?;
                            flat.reshape(vec![conv.batch, conv.height, conv.width, layer.out_dim])?
                        }
                    }
                }
                (weights, codes) => {
                    // real-valued fallback: dequantize whichever side is coded
                    let acts = match codes {
                        Some(c) => c.dequantize(),
                        None => current.clone(),
                    };
                    let w = match weights {
                        PackedWeights::Dense(w) => w.clone(),
                        PackedWeights::Packed(gemm) => gemm.dequantize_weights()?,
                    };
                    let mut y = match layer.kind {
                        LayerKind::Linear => {
                            let batch = acts.shape()[0];
                            let flat: usize = acts.shape()[1..].iter().product();
                            let flat_acts = acts.reshape(vec![batch, flat])?;
                            matmul(&flat_acts, &transpose(&w)?)?
                        }
                        LayerKind::Conv3x3 => {
                            let s = acts.shape().to_vec();
                            let conv = ConvShape {
                                batch: s[0],
                                height: s[1],
                                width: s[2],
                                channels: s[3],
                            };
                            let cols = crate::graph::im2col_forward(&acts, conv)?;
                            let flat = matmul(&cols, &transpose(&w)?)?;
                            flat.reshape(vec![conv.batch, conv.height, conv.width, layer.out_dim])?
                        }
                    };
                    add_bias(&mut y, &layer.bias);
                    y
                }
            };
            if let Some(rp) = &layer.rprelu {
                out = rprelu_eval(&out, rp)?;
            }
            current = out;
        }
        Ok(current)
    }

    pub fn cast<U: Real>(&self) -> PackedNet<U> {
        PackedNet {
            layers: self
                .layers
                .iter()
                .map(|l| PackedLayer {
                    kind: l.kind,
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                    weights: match &l.weights {
                        PackedWeights::Dense(w) => PackedWeights::Dense(w.cast()),
                        PackedWeights::Packed(g) => PackedWeights::Packed(g.cast()),
                    },
                    bias: l.bias.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
                    act_params: l.act_params.as_ref().map(|p| {
                        QuantParams::new(
                            p.n(),
                            U::from_f64(p.start.as_f64()),
                            p.widths.iter().map(|&w| U::from_f64(w.as_f64())).collect(),
                            U::from_f64(p.beta1.as_f64()),
                            U::from_f64(p.beta2.as_f64()),
                        )
                        .expect("valid params stay valid across precision")
                    }),
                    rprelu: l.rprelu.as_ref().map(|r| RpReluParams {
                        shift_in: r.shift_in.cast(),
                        slope: r.slope.cast(),
                        shift_out: r.shift_out.cast(),
                    }),
                })
                .collect(),
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
        }
    }
}

/// Classification accuracy of a packed model; sharding as in the training
/// path, order-independent reduction.
pub fn evaluate_packed<T: Real>(net: &PackedNet<T>, data: &Dataset, threads: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::DegenerateInput("evaluation dataset is empty".into()));
    }
    let threads = threads.max(1).min(data.len());
    let shard = data.len().div_ceil(threads);
    let correct: usize = std::thread::scope(|scope| -> Result<usize> {
        let mut handles = Vec::new();
        for t in 0..threads {
            let lo = t * shard;
            let hi = ((t + 1) * shard).min(data.len());
            if lo >= hi {
                continue;
            }
            handles.push(scope.spawn(move || -> Result<usize> {
                let mut correct = 0usize;
                let indices: Vec<usize> = (lo..hi).collect();
                for chunk in indices.chunks(128) {
                    let (x, labels) = data.batch::<T>(chunk);
                    let logits = net.forward(&x)?;
                    correct += count_correct(&logits, &labels);
                }
                Ok(correct)
            }));
        }
        let mut total = 0usize;
        for h in handles {
            total += h.join().expect("evaluation worker panicked")?;
        }
        Ok(total)
    })?;
    Ok(correct as f64 / data.len() as f64)
}

// ── Binary container ─────────────────────────────────────────────────

fn put_f32<T: Real>(out: &mut Vec<u8>, v: T) {
    out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
}

pub fn write_packed<T: Real>(net: &PackedNet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PACK_MAGIC);
    out.extend_from_slice(&PACK_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for layer in &net.layers {
        out.push(match layer.kind {
            LayerKind::Linear => 0,
            LayerKind::Conv3x3 => 1,
        });
        out.extend_from_slice(&(layer.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(layer.out_dim as u32).to_le_bytes());
        match &layer.weights {
            PackedWeights::Dense(w) => {
                out.push(0);
                out.extend_from_slice(&(w.shape()[1] as u32).to_le_bytes());
                for &v in w.data() {
                    put_f32(&mut out, v);
                }
            }
            PackedWeights::Packed(g) => {
                out.push(1);
                out.extend_from_slice(&g.m_bits().to_le_bytes());
                out.extend_from_slice(&g.k_bits().to_le_bytes());
                out.extend_from_slice(&(g.out_dim() as u32).to_le_bytes());
                out.extend_from_slice(&(g.in_dim() as u32).to_le_bytes());
                let words = g.in_dim().div_ceil(64) as u32;
                out.extend_from_slice(&words.to_le_bytes());
                for r in 0..g.out_dim() {
                    let row = g.row(r);
                    for b in 0..g.k_bits() as usize {
                        for &word in row.plane(b) {
                            out.extend_from_slice(&word.to_le_bytes());
                        }
                    }
                }
                put_f32(&mut out, g.w_scale());
                put_f32(&mut out, g.w_offset());
                put_f32(&mut out, g.act_scale());
            }
        }
        for &v in &layer.bias {
            put_f32(&mut out, v);
        }
        match &layer.act_params {
            None => out.push(0),
            Some(p) => {
                out.push(1);
                out.extend_from_slice(&p.n().to_le_bytes());
                put_f32(&mut out, p.start);
                put_f32(&mut out, p.beta1);
                put_f32(&mut out, p.beta2);
                for &w in &p.widths {
                    put_f32(&mut out, w);
                }
            }
        }
        match &layer.rprelu {
            None => out.push(0),
            Some(r) => {
                out.push(1);
                let channels = r.shift_in.shape()[0] as u32;
                out.extend_from_slice(&channels.to_le_bytes());
                for t in [&r.shift_in, &r.slope, &r.shift_out] {
                    for &v in t.data() {
                        put_f32(&mut out, v);
                    }
                }
            }
        }
    }
    out.extend_from_slice(&(net.input_shape.len() as u32).to_le_bytes());
    for &d in &net.input_shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(net.num_classes as u32).to_le_bytes());
    out
}

pub fn read_packed(bytes: &[u8]) -> Result<PackedNet<f32>> {
    let mut r = LeReader { bytes, offset: 0 };
    if r.take(8)? != PACK_MAGIC {
        return Err(Error::Format { offset: 0, message: "bad container magic".into() });
    }
    let version = r.u32()?;
    if version != PACK_VERSION {
        return Err(Error::Format {
            offset: 8,
            message: format!("unsupported container version {version}"),
        });
    }
    let layer_count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let kind = match r.u8()? {
            0 => LayerKind::Linear,
            1 => LayerKind::Conv3x3,
            other => {
                return Err(Error::Format {
                    offset: r.offset as u64 - 1,
                    message: format!("unknown layer kind {other}"),
                })
            }
        };
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let weights = match r.u8()? {
            0 => {
                let fan_in = r.u32()? as usize;
                let mut data = Vec::with_capacity(out_dim * fan_in);
                for _ in 0..out_dim * fan_in {
                    data.push(r.f32()?);
                }
                PackedWeights::Dense(Tensor::new(vec![out_dim, fan_in], data)?)
            }
            1 => {
                let m_bits = r.u32()?;
                let k_bits = r.u32()?;
                let rows_n = r.u32()? as usize;
                let fan_in = r.u32()? as usize;
                let words = r.u32()? as usize;
                if rows_n != out_dim {
                    return Err(Error::Format {
                        offset: r.offset as u64,
                        message: format!("{rows_n} packed rows for out_dim {out_dim}"),
                    });
                }
                let mut rows = Vec::with_capacity(rows_n);
                for _ in 0..rows_n {
                    let mut planes = Vec::with_capacity(k_bits as usize);
                    for _ in 0..k_bits {
                        let mut plane = Vec::with_capacity(words);
                        for _ in 0..words {
                            plane.push(r.u64()?);
                        }
                        planes.push(plane);
                    }
                    rows.push(BitPlanes::from_words(planes, fan_in, k_bits)?);
                }
                let w_scale = r.f32()?;
                let w_offset = r.f32()?;
                let act_scale = r.f32()?;
                PackedWeights::Packed(QuantLinearPacked::from_parts(
                    rows,
                    m_bits,
                    k_bits,
                    fan_in,
                    w_scale,
                    w_offset,
                    act_scale,
                    None, // bias attached below
                )?)
            }
            other => {
                return Err(Error::Format {
                    offset: r.offset as u64 - 1,
                    message: format!("unknown weight tag {other}"),
                })
            }
        };
        let mut bias = Vec::with_capacity(out_dim);
        for _ in 0..out_dim {
            bias.push(r.f32()?);
        }
        let weights = match weights {
            PackedWeights::Packed(g) => PackedWeights::Packed(g.with_bias(Some(bias.clone()))?),
            dense => dense,
        };
        let act_params = read_act_params(&mut r)?;
        let rprelu = read_rprelu(&mut r)?;
        layers.push(PackedLayer { kind, in_dim, out_dim, weights, bias, act_params, rprelu });
    }
    let rank = r.u32()? as usize;
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(r.u32()? as usize);
    }
    let num_classes = r.u32()? as usize;
    if r.offset != bytes.len() {
        return Err(Error::Format {
            offset: r.offset as u64,
            message: "trailing bytes after container".into(),
        });
    }
    Ok(PackedNet { layers, input_shape, num_classes })
}

fn read_act_params(r: &mut LeReader) -> Result<Option<QuantParams<f32>>> {
    match r.u8()? {
        0 => Ok(None),
        1 => {
            let n = r.u32()?;
            let start = r.f32()?;
            let beta1 = r.f32()?;
            let beta2 = r.f32()?;
            if n == 0 || n > 8 {
                return Err(Error::Format {
                    offset: r.offset as u64,
                    message: format!("bad activation bit width {n}"),
                });
            }
            let count = (1usize << n) - 1;
            let mut widths = Vec::with_capacity(count);
            for _ in 0..count {
                widths.push(r.f32()?);
            }
            Ok(Some(QuantParams::new(n, start, widths, beta1, beta2)?))
        }
        other => Err(Error::Format {
            offset: r.offset as u64 - 1,
            message: format!("unknown act tag {other}"),
        }),
    }
}

fn read_rprelu(r: &mut LeReader) -> Result<Option<RpReluParams<f32>>> {
    match r.u8()? {
        0 => Ok(None),
        1 => {
            let channels = r.u32()? as usize;
            let mut tensors = Vec::with_capacity(3);
            for _ in 0..3 {
                let mut data = Vec::with_capacity(channels);
                for _ in 0..channels {
                    data.push(r.f32()?);
                }
                tensors.push(Tensor::from_slice(&data));
            }
            let shift_out = tensors.pop().unwrap();
            let slope = tensors.pop().unwrap();
            let shift_in = tensors.pop().unwrap();
            Ok(Some(RpReluParams { shift_in, slope, shift_out }))
        }
        other => Err(Error::Format {
            offset: r.offset as u64 - 1,
            message: format!("unknown rprelu tag {other}"),
        }),
    }
}

pub fn save_packed<T: Real>(net: &PackedNet<T>, path: &Path) -> Result<()> {
    fs::write(path, write_packed(net))?;
    Ok(())
}

pub fn load_packed(path: &Path) -> Result<PackedNet<f32>> {
    read_packed(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::LayerSpec;
    use crate::quant::QuantMode;
    use crate::rng::SplitMix64;

    fn random_net(seed: u64) -> Network<f64> {
        let specs = vec![
            LayerSpec::linear(6, 12),
            LayerSpec::linear(12, 12).quantized(2, 2),
            LayerSpec::linear(12, 12).quantized(3, 3),
            LayerSpec::linear(12, 4),
        ];
        let mut rng = SplitMix64::new(seed);
        Network::new(specs, vec![6], 4, "n2uq", "entropy", &mut rng).unwrap()
    }

    fn random_input(net_input: usize, batch: usize, seed: u64) -> Tensor<f64> {
        let mut rng = SplitMix64::new(seed);
        Tensor::new(
            vec![batch, net_input],
            (0..batch * net_input).map(|_| rng.next_range(-1.5, 1.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn packed_forward_matches_training_path() {
        let net = random_net(41);
        let packed = pack_network(&net).unwrap();
        let x = random_input(6, 9, 77);
        let mut g = crate::graph::Graph::new();
        let pass = net.forward(&mut g, x.clone(), QuantMode::Exact, false).unwrap();
        let reference = g.value(pass.logits);
        let fast = packed.forward(&x).unwrap();
        let diff = fast.max_abs_diff(reference);
        assert!(diff < 1e-9, "paths differ by {diff}");
    }

    #[test]
    fn packed_conv_forward_matches_training_path() {
        let specs = vec![
            LayerSpec::conv3x3(1, 3),
            LayerSpec::conv3x3(3, 3).quantized(2, 2),
            LayerSpec::linear(5 * 5 * 3, 2),
        ];
        let mut rng = SplitMix64::new(9);
        let net = Network::<f64>::new(specs, vec![5, 5, 1], 2, "n2uq", "entropy", &mut rng).unwrap();
        let packed = pack_network(&net).unwrap();
        let mut rng = SplitMix64::new(10);
        let x = Tensor::new(vec![3, 5, 5, 1], (0..75).map(|_| rng.next_range(0.0, 1.0)).collect())
            .unwrap();
        let mut g = crate::graph::Graph::new();
        let pass = net.forward(&mut g, x.clone(), QuantMode::Exact, false).unwrap();
        let fast = packed.forward(&x).unwrap();
        let diff = fast.max_abs_diff(g.value(pass.logits));
        assert!(diff < 1e-9, "paths differ by {diff}");
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let net = random_net(55);
        let packed = pack_network(&net).unwrap();
        let bytes = write_packed(&packed);
        assert_eq!(&bytes[0..8], PACK_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), PACK_VERSION);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
        let loaded = read_packed(&bytes).unwrap();
        assert_eq!(write_packed(&loaded), bytes);
    }

    #[test]
    fn loaded_container_preserves_outputs_at_f32_precision() {
        // weights come from an f32-trained net, so the f32 container is lossless
        let net64 = random_net(70);
        let net = net64.cast::<f32>().unwrap().cast::<f64>().unwrap();
        let packed = pack_network(&net).unwrap();
        let loaded = read_packed(&write_packed(&packed)).unwrap().cast::<f64>();
        let x = random_input(6, 5, 3);
        let a = packed.forward(&x).unwrap();
        let b = loaded.forward(&x).unwrap();
        // scales derived in f64 (e.g. beta2 * 2/3) round to f32 in the file
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn truncated_container_is_a_format_error() {
        let net = random_net(1);
        let bytes = write_packed(&pack_network(&net).unwrap());
        assert!(matches!(
            read_packed(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        assert!(matches!(read_packed(b"WRONG!!!"), Err(Error::Format { .. })));
    }

    #[test]
    fn single_neuron_layer_reproduces_the_bridged_dot_product() {
        use crate::quant::act::{quantize_forward, QuantParams};
        use crate::quant::weight::fq_quantize;
        // activations quantize to codes [3, 1] under the 2-bit defaults
        let p = QuantParams::<f64>::defaults(2).unwrap();
        let acts = quantize_forward(&Tensor::new(vec![1, 2], vec![2.5, 0.5]).unwrap(), &p).unwrap();
        assert_eq!(acts.codes(), &[3, 1]);
        // weights quantize to codes [2, 3] (levels 1/3 and 1)
        let wq = fq_quantize(&Tensor::new(vec![1, 2], vec![0.34, 0.99]).unwrap(), 2).unwrap();
        assert_eq!(wq.codes(), &[2, 3]);

        // training path: real dot of the dequantized operands
        let reference = matmul(
            &acts.dequantize(),
            &crate::tensor::transpose(&wq.dequantize()).unwrap(),
        )
        .unwrap();
        assert!((reference.data()[0] - 4.0 / 3.0).abs() < 1e-12);

        // packed path: popcount GEMM with the affine correction
        let gemm = QuantLinearPacked::new(&CodeTensor::from(&wq), 2, acts.out_scale(), None).unwrap();
        let fast = gemm.infer(&CodeTensor::from(&acts)).unwrap();
        assert!((fast.data()[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!(fast.max_abs_diff(&reference) < 1e-12);
    }

    #[test]
    fn dense_zero_weight_layer_returns_bias() {
        let bias = vec![0.75, -0.25, 2.0];
        let net = PackedNet::<f64> {
            layers: vec![PackedLayer {
                kind: LayerKind::Linear,
                in_dim: 4,
                out_dim: 3,
                weights: PackedWeights::Dense(Tensor::zeros(vec![3, 4])),
                bias: bias.clone(),
                act_params: None,
                rprelu: None,
            }],
            input_shape: vec![4],
            num_classes: 3,
        };
        let x = Tensor::new(vec![2, 4], vec![1.0, -2.0, 3.0, 0.5, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let out = net.forward(&x).unwrap();
        for b in 0..2 {
            for (j, &expect) in bias.iter().enumerate() {
                assert_eq!(out.at2(b, j), expect);
            }
        }
    }

    #[test]
    fn first_and_last_layers_stay_dense_in_the_container() {
        let net = random_net(12);
        let packed = pack_network(&net).unwrap();
        assert!(matches!(packed.layers[0].weights, PackedWeights::Dense(_)));
        assert!(matches!(packed.layers[1].weights, PackedWeights::Packed(_)));
        assert!(matches!(packed.layers[3].weights, PackedWeights::Dense(_)));
        assert!(packed.layers[0].act_params.is_none());
        assert!(packed.layers[1].act_params.is_some());
    }
}
