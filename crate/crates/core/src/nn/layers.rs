//! Network definition: layer specs, parameter storage, and per-batch graph
//! construction wiring the quantizer strategies into the autodiff tape.
//!
//! Activations flow channel-last everywhere (`[batch, features]` for dense
//! layers, `[batch, h, w, c]` for 3x3 convolutions, which lower onto the
//! linear core through patch extraction). The first and last layers of a
//! network are always full precision.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{ConvShape, Graph, NodeId};
use crate::quant::act::{clamp_widths, ActQuantNode, ActScheme, QuantParams};
use crate::quant::registry;
use crate::quant::weight::{QuantizedWeights, WeightQuantNode, WeightScheme};
use crate::quant::QuantMode;
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Conv3x3,
}

/// One layer's shape and quantization flags. For convolutions `in_dim` and
/// `out_dim` are channel counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub quantize_weights: bool,
    pub quantize_acts: bool,
    pub n_w: u32,
    pub n_a: u32,
}

impl LayerSpec {
    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        Self {
            kind: LayerKind::Linear,
            in_dim,
            out_dim,
            quantize_weights: false,
            quantize_acts: false,
            n_w: 0,
            n_a: 0,
        }
    }

    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: LayerKind::Conv3x3,
            in_dim: in_channels,
            out_dim: out_channels,
            ..Self::linear(0, 0)
        }
    }

    pub fn quantized(mut self, n_w: u32, n_a: u32) -> Self {
        self.quantize_weights = true;
        self.quantize_acts = true;
        self.n_w = n_w;
        self.n_a = n_a;
        self
    }

    /// Weight-matrix fan-in: features for dense layers, `channels * 9` for
    /// 3x3 convolutions.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Linear => self.in_dim,
            LayerKind::Conv3x3 => self.in_dim * 9,
        }
    }
}

/// Per-channel nonlinearity parameters: input shift, negative-side slope,
/// output shift.
#[derive(Clone, Debug, PartialEq)]
pub struct RpReluParams<T> {
    pub shift_in: Tensor<T>,
    pub slope: Tensor<T>,
    pub shift_out: Tensor<T>,
}

impl<T: Real> RpReluParams<T> {
    pub fn init(channels: usize) -> Self {
        Self {
            shift_in: Tensor::zeros(vec![channels]),
            slope: Tensor::full(vec![channels], T::from_f64(0.25)),
            shift_out: Tensor::zeros(vec![channels]),
        }
    }
}

/// Pure evaluation of the nonlinearity (channel-last), matching the graph op.
pub fn rprelu_eval<T: Real>(x: &Tensor<T>, p: &RpReluParams<T>) -> Result<Tensor<T>> {
    let channels = p.shift_in.shape()[0];
    if *x.shape().last().unwrap_or(&0) != channels {
        return Err(Error::shape("rprelu", x.shape(), p.shift_in.shape()));
    }
    let mut data = Vec::with_capacity(x.numel());
    for (i, &v) in x.data().iter().enumerate() {
        let c = i % channels;
        let shifted = v - p.shift_in.data()[c];
        let y = if shifted >= T::zero() {
            shifted
        } else {
            p.slope.data()[c] * shifted
        };
        data.push(y + p.shift_out.data()[c]);
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Activation-quantizer parameters stored as trainable tensors
/// (`start`/`beta1`/`beta2` rank-0, `widths` rank-1).
#[derive(Clone, Debug, PartialEq)]
pub struct ActParams<T> {
    pub start: Tensor<T>,
    pub widths: Tensor<T>,
    pub beta1: Tensor<T>,
    pub beta2: Tensor<T>,
}

impl<T: Real> ActParams<T> {
    pub fn from_quant(p: &QuantParams<T>) -> Self {
        Self {
            start: Tensor::scalar(p.start),
            widths: Tensor::from_slice(&p.widths),
            beta1: Tensor::scalar(p.beta1),
            beta2: Tensor::scalar(p.beta2),
        }
    }

    pub fn to_quant(&self, n: u32) -> Result<QuantParams<T>> {
        QuantParams::new(
            n,
            self.start.scalar_value()?,
            self.widths.data().to_vec(),
            self.beta1.scalar_value()?,
            self.beta2.scalar_value()?,
        )
    }
}

/// One layer's trainable state.
#[derive(Clone, Debug)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    /// `[out_dim, fan_in]`; rows are output-channel filters.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub act: Option<ActParams<T>>,
    /// Extra scalars owned by the weight scheme (learned-scale multiplier).
    pub wq_scalars: Option<Tensor<T>>,
    /// Nonlinearity applied after this layer; absent on the last layer.
    pub rprelu: Option<RpReluParams<T>>,
}

/// Result of recording one forward pass: the logits node and every parameter
/// leaf by name, in deterministic order.
pub struct ForwardPass {
    pub logits: NodeId,
    pub params: Vec<(String, NodeId)>,
}

impl ForwardPass {
    pub fn param(&self, name: &str) -> Option<NodeId> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }
}

/// A feed-forward network with per-layer quantization, built from named
/// strategy registries.
pub struct Network<T: Real> {
    pub layers: Vec<Layer<T>>,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    act_scheme_name: String,
    weight_scheme_name: String,
    act_scheme: Arc<dyn ActScheme<T>>,
    weight_scheme: Arc<dyn WeightScheme<T>>,
}

impl<T: Real> Clone for Network<T> {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            act_scheme_name: self.act_scheme_name.clone(),
            weight_scheme_name: self.weight_scheme_name.clone(),
            act_scheme: Arc::clone(&self.act_scheme),
            weight_scheme: Arc::clone(&self.weight_scheme),
        }
    }
}

impl<T: Real> Network<T> {
    pub fn new(
        specs: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        num_classes: usize,
        act_scheme_name: &str,
        weight_scheme_name: &str,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::contract("network needs at least one layer"));
        }
        let first = specs.first().unwrap();
        let last = specs.last().unwrap();
        if first.quantize_weights || first.quantize_acts || last.quantize_weights || last.quantize_acts
        {
            return Err(Error::contract(
                "first and last layers must stay full precision",
            ));
        }
        if last.kind != LayerKind::Linear || last.out_dim != num_classes {
            return Err(Error::contract(format!(
                "last layer must be linear onto {num_classes} classes"
            )));
        }
        // shape check through the stack
        let mut shape = input_shape.clone();
        for (i, spec) in specs.iter().enumerate() {
            match spec.kind {
                LayerKind::Linear => {
                    let flat: usize = shape.iter().product();
                    if flat != spec.in_dim {
                        return Err(Error::contract(format!(
                            "layer {i}: flattened input {flat} != in_dim {}",
                            spec.in_dim
                        )));
                    }
                    shape = vec![spec.out_dim];
                }
                LayerKind::Conv3x3 => {
                    if shape.len() != 3 || shape[2] != spec.in_dim {
                        return Err(Error::contract(format!(
                            "layer {i}: conv3x3 expects [h, w, {}] input, got {shape:?}",
                            spec.in_dim
                        )));
                    }
                    shape = vec![shape[0], shape[1], spec.out_dim];
                }
            }
        }

        let act_scheme = registry::act_scheme::<T>(act_scheme_name)?;
        let weight_scheme = registry::weight_scheme::<T>(weight_scheme_name)?;

        let count = specs.len();
        let mut layers = Vec::with_capacity(count);
        for (i, spec) in specs.into_iter().enumerate() {
            let fan_in = spec.fan_in();
            let std = (2.0 / fan_in as f64).sqrt();
            let weight = Tensor::new(
                vec![spec.out_dim, fan_in],
                (0..spec.out_dim * fan_in)
                    .map(|_| T::from_f64(rng.next_gaussian() * std))
                    .collect(),
            )?;
            let act = if spec.quantize_acts {
                Some(ActParams::from_quant(&act_scheme.init(spec.n_a)?))
            } else {
                None
            };
            let wq_scalars = if spec.quantize_weights && weight_scheme.learnable_scalars() > 0 {
                Some(Tensor::from_slice(&weight_scheme.init_scalars(&weight, spec.n_w)?))
            } else {
                None
            };
            let rprelu = (i + 1 < count).then(|| RpReluParams::init(spec.out_dim));
            layers.push(Layer {
                spec,
                weight,
                bias: Tensor::zeros(vec![spec.out_dim]),
                act,
                wq_scalars,
                rprelu,
            });
        }
        Ok(Self {
            layers,
            input_shape,
            num_classes,
            act_scheme_name: act_scheme_name.to_string(),
            weight_scheme_name: weight_scheme_name.to_string(),
            act_scheme,
            weight_scheme,
        })
    }

    pub fn act_scheme_name(&self) -> &str {
        &self.act_scheme_name
    }

    pub fn weight_scheme_name(&self) -> &str {
        &self.weight_scheme_name
    }

    pub fn act_scheme(&self) -> &Arc<dyn ActScheme<T>> {
        &self.act_scheme
    }

    pub fn weight_scheme(&self) -> &Arc<dyn WeightScheme<T>> {
        &self.weight_scheme
    }

    /// Total learnable quantizer scalars across the network
    /// (`2^n_a + 2` per quantized-activation layer under the learnable
    /// strategy, zero under the frozen baseline).
    pub fn quantizer_scalar_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.spec.quantize_acts)
            .map(|l| self.act_scheme.scalar_count(l.spec.n_a))
            .sum()
    }

    /// Quantized weight codes for one layer; `None` for full-precision
    /// layers (structurally, not as an empty code table).
    pub fn quantized_weights(&self, layer: usize) -> Result<Option<QuantizedWeights<T>>> {
        let l = &self.layers[layer];
        if !l.spec.quantize_weights {
            return Ok(None);
        }
        let scalars = l
            .wq_scalars
            .as_ref()
            .map(|t| t.data().to_vec())
            .unwrap_or_default();
        Ok(Some(self.weight_scheme.quantize(&l.weight, &scalars, l.spec.n_w)?))
    }

    /// Records one forward pass. `train` controls whether parameter leaves
    /// require gradients; `mode` selects hard quantization or the smooth
    /// surrogate (gradient checks).
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        input: Tensor<T>,
        mode: QuantMode,
        train: bool,
    ) -> Result<ForwardPass> {
        let mut params = Vec::new();
        let mut current = g.leaf(input, false);
        let act_learnable = self.act_scheme.learnable();
        for (i, layer) in self.layers.iter().enumerate() {
            // activation quantizer on this layer's input
            if let Some(act) = &layer.act {
                let s = g.leaf(act.start.clone(), train && act_learnable);
                let a = g.leaf(act.widths.clone(), train && act_learnable);
                let b1 = g.leaf(act.beta1.clone(), train && act_learnable);
                let b2 = g.leaf(act.beta2.clone(), train && act_learnable);
                if act_learnable {
                    params.push((format!("layer{i}.act.start"), s));
                    params.push((format!("layer{i}.act.widths"), a));
                    params.push((format!("layer{i}.act.beta1"), b1));
                    params.push((format!("layer{i}.act.beta2"), b2));
                }
                current = g.custom(
                    Box::new(ActQuantNode { n: layer.spec.n_a, mode }),
                    &[current, s, a, b1, b2],
                )?;
            }

            // weights, optionally through the rescale + fixed quantizer
            let w_leaf = g.leaf(layer.weight.clone(), train);
            params.push((format!("layer{i}.weight"), w_leaf));
            let w_node = if layer.spec.quantize_weights {
                let mut inputs = vec![w_leaf];
                if let Some(scalars) = &layer.wq_scalars {
                    let sc = g.leaf(scalars.clone(), train);
                    params.push((format!("layer{i}.wq.scalars"), sc));
                    inputs.push(sc);
                }
                g.custom(
                    Box::new(WeightQuantNode {
                        scheme: Arc::clone(&self.weight_scheme),
                        n: layer.spec.n_w,
                        mode,
                    }),
                    &inputs,
                )?
            } else {
                w_leaf
            };

            // linear core (convolutions lower through patch extraction)
            let pre_bias = match layer.spec.kind {
                LayerKind::Linear => {
                    let shape = g.value(current).shape().to_vec();
                    if shape.len() > 2 {
                        let batch = shape[0];
                        let flat: usize = shape[1..].iter().product();
                        current = g.reshape(current, vec![batch, flat])?;
                    }
                    let wt = g.transpose(w_node)?;
                    g.matmul(current, wt)?
                }
                LayerKind::Conv3x3 => {
                    let shape = g.value(current).shape().to_vec();
                    if shape.len() != 4 {
                        return Err(Error::contract(format!(
                            "layer {i}: conv3x3 expects [batch, h, w, c] input, got {shape:?}"
                        )));
                    }
                    let conv = ConvShape {
                        batch: shape[0],
                        height: shape[1],
                        width: shape[2],
                        channels: shape[3],
                    };
                    let cols = g.im2col(current, conv)?;
                    let wt = g.transpose(w_node)?;
                    let flat = g.matmul(cols, wt)?;
                    g.reshape(flat, vec![conv.batch, conv.height, conv.width, layer.spec.out_dim])?
                }
            };
            let b_leaf = g.leaf(layer.bias.clone(), train);
            params.push((format!("layer{i}.bias"), b_leaf));
            current = g.add_bias(pre_bias, b_leaf)?;

            if let Some(rp) = &layer.rprelu {
                let gamma = g.leaf(rp.shift_in.clone(), train);
                let beta = g.leaf(rp.slope.clone(), train);
                let zeta = g.leaf(rp.shift_out.clone(), train);
                params.push((format!("layer{i}.rprelu.shift_in"), gamma));
                params.push((format!("layer{i}.rprelu.slope"), beta));
                params.push((format!("layer{i}.rprelu.shift_out"), zeta));
                current = g.rprelu(current, gamma, beta, zeta)?;
            }
        }
        Ok(ForwardPass { logits: current, params })
    }

    /// Forward plus mean cross-entropy loss on a labeled batch.
    pub fn loss_graph(
        &self,
        input: Tensor<T>,
        labels: &[usize],
        mode: QuantMode,
        train: bool,
    ) -> Result<(Graph<T>, NodeId, ForwardPass)> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, input, mode, train)?;
        let loss = g.softmax_cross_entropy(pass.logits, labels)?;
        Ok((g, loss, pass))
    }

    /// Mutable access to a named parameter tensor (optimizer write-back).
    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let (layer_part, field) = name
            .split_once('.')
            .ok_or_else(|| Error::contract(format!("bad parameter name '{name}'")))?;
        let idx: usize = layer_part
            .strip_prefix("layer")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::contract(format!("bad parameter name '{name}'")))?;
        let layer = self
            .layers
            .get_mut(idx)
            .ok_or_else(|| Error::contract(format!("no layer {idx}")))?;
        let missing = || Error::contract(format!("parameter '{name}' does not exist"));
        match field {
            "weight" => Ok(&mut layer.weight),
            "bias" => Ok(&mut layer.bias),
            "act.start" => layer.act.as_mut().map(|a| &mut a.start).ok_or_else(missing),
            "act.widths" => layer.act.as_mut().map(|a| &mut a.widths).ok_or_else(missing),
            "act.beta1" => layer.act.as_mut().map(|a| &mut a.beta1).ok_or_else(missing),
            "act.beta2" => layer.act.as_mut().map(|a| &mut a.beta2).ok_or_else(missing),
            "wq.scalars" => layer.wq_scalars.as_mut().ok_or_else(missing),
            "rprelu.shift_in" => layer.rprelu.as_mut().map(|r| &mut r.shift_in).ok_or_else(missing),
            "rprelu.slope" => layer.rprelu.as_mut().map(|r| &mut r.slope).ok_or_else(missing),
            "rprelu.shift_out" => {
                layer.rprelu.as_mut().map(|r| &mut r.shift_out).ok_or_else(missing)
            }
            _ => Err(missing()),
        }
    }

    /// Floors interval widths after an optimizer step on the given param.
    pub fn clamp_after_step(&mut self, name: &str) -> Result<()> {
        if name.ends_with("act.widths") {
            clamp_widths(self.param_mut(name)?.data_mut());
        }
        Ok(())
    }

    /// Whether a parameter belongs to the quantizer group (reduced learning
    /// rate).
    pub fn is_quantizer_param(name: &str) -> bool {
        name.contains(".act.")
    }

    /// Rebuilds the network at another precision (eval paths run at f64).
    pub fn cast<U: Real>(&self) -> Result<Network<U>> {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                spec: l.spec,
                weight: l.weight.cast::<U>(),
                bias: l.bias.cast::<U>(),
                act: l.act.as_ref().map(|a| ActParams {
                    start: a.start.cast(),
                    widths: a.widths.cast(),
                    beta1: a.beta1.cast(),
                    beta2: a.beta2.cast(),
                }),
                wq_scalars: l.wq_scalars.as_ref().map(|t| t.cast()),
                rprelu: l.rprelu.as_ref().map(|r| RpReluParams {
                    shift_in: r.shift_in.cast(),
                    slope: r.slope.cast(),
                    shift_out: r.shift_out.cast(),
                }),
            })
            .collect();
        Ok(Network {
            layers,
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            act_scheme_name: self.act_scheme_name.clone(),
            weight_scheme_name: self.weight_scheme_name.clone(),
            act_scheme: registry::act_scheme::<U>(&self.act_scheme_name)?,
            weight_scheme: registry::weight_scheme::<U>(&self.weight_scheme_name)?,
        })
    }
}

/// Serializes layer specs into the compact arch grammar used by checkpoints
/// (`kind:in:out:qw:qa:nw:na` joined by `;`).
pub fn arch_to_string(specs: &[LayerSpec]) -> String {
    specs
        .iter()
        .map(|s| {
            let kind = match s.kind {
                LayerKind::Linear => "linear",
                LayerKind::Conv3x3 => "conv3x3",
            };
            format!(
                "{kind}:{}:{}:{}:{}:{}:{}",
                s.in_dim,
                s.out_dim,
                s.quantize_weights as u8,
                s.quantize_acts as u8,
                s.n_w,
                s.n_a
            )
        })
        .collect::<Vec<_>>()
        .join(";")
}

pub fn arch_from_string(text: &str) -> Result<Vec<LayerSpec>> {
    text.split(';')
        .map(|part| {
            let fields: Vec<&str> = part.split(':').collect();
            if fields.len() != 7 {
                return Err(Error::Parse(format!("bad arch segment '{part}'")));
            }
            let kind = match fields[0] {
                "linear" => LayerKind::Linear,
                "conv3x3" => LayerKind::Conv3x3,
                other => return Err(Error::Parse(format!("unknown layer kind '{other}'"))),
            };
            let num = |i: usize| -> Result<usize> {
                fields[i]
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad arch field '{}'", fields[i])))
            };
            Ok(LayerSpec {
                kind,
                in_dim: num(1)?,
                out_dim: num(2)?,
                quantize_weights: num(3)? != 0,
                quantize_acts: num(4)? != 0,
                n_w: num(5)? as u32,
                n_a: num(6)? as u32,
            })
        })
        .collect()
}
