//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward pass records nodes onto a fresh tape; `backward` replays the
//! tape in reverse, so each node's backward runs exactly once and strictly
//! after all of its consumers. Gradients across fan-out accumulate by
//! summation. Nodes recorded through [`Graph::custom`] may pair a forward
//! function with an unrelated backward function (surrogate gradients); such
//! nodes are flagged as custom-gradient and their backward is used verbatim,
//! never an autodiff of their forward.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{matmul, transpose, Real, Tensor};

/// Handle to a node on a tape. Only valid for the graph that minted it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Spatial metadata for the 3x3 same-padding patch extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// An operation whose backward is supplied by the caller instead of being
/// derived from its forward.
pub trait CustomOp<T: Real>: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Computes the output value plus any context tensors to save for
    /// backward (e.g. per-element segment indices).
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)>;

    /// Maps the upstream gradient to one gradient per input, in input order.
    /// `None` entries are only permitted for inputs that do not require
    /// gradients.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        saved: &[Tensor<T>],
        upstream: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

type FwdFn<T> = dyn Fn(&[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)>;
type BwdFn<T> = dyn Fn(&[&Tensor<T>], &[Tensor<T>], &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>;

/// Closure-backed [`CustomOp`], convenient for one-off surrogate nodes.
pub struct ClosureOp<T: Real> {
    name: &'static str,
    fwd: Box<FwdFn<T>>,
    bwd: Box<BwdFn<T>>,
}

impl<T: Real> fmt::Debug for ClosureOp<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ClosureOp({})", self.name)
    }
}

impl<T: Real> CustomOp<T> for ClosureOp<T> {
    fn name(&self) -> &'static str {
        self.name
    }
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        (self.fwd)(inputs)
    }
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        saved: &[Tensor<T>],
        upstream: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        (self.bwd)(inputs, saved, upstream)
    }
}

enum Op<T: Real> {
    Leaf,
    Add(NodeId, NodeId),
    /// `rhs` (rank-1) broadcast over the leading dimensions of `lhs`.
    AddBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RpRelu {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        zeta: NodeId,
    },
    /// Fused mean softmax cross-entropy against integer labels; saves the
    /// softmax probabilities for backward.
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Im2col(NodeId, ConvShape),
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp<T>>,
        saved: Vec<Tensor<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradient map produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. the given node, if it was reached and requires one.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient that must exist (trainable parameters).
    pub fn expect(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.get(id)
            .ok_or_else(|| Error::contract(format!("no gradient recorded for node {}", id.0)))
    }
}

/// Recording tape. One per forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// True when the node's backward is a caller-supplied surrogate rather
    /// than the derivative of its forward.
    pub fn is_custom_gradient(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Custom { .. })
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        id
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(value, self.any_grad(&[a, b]), Op::Add(a, b)))
    }

    /// `a + bias` where `bias` is rank-1 and matches the last axis of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        let cols = *av.shape().last().unwrap_or(&0);
        if bv.shape().len() != 1 || bv.shape()[0] != cols {
            return Err(Error::shape("add_bias", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bv.data()[i % cols];
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, self.any_grad(&[a, bias]), Op::AddBias(a, bias)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(value, self.any_grad(&[a, b]), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(value, self.any_grad(&[a, b]), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, self.requires_grad(a), Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, self.any_grad(&[a, b]), Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = transpose(self.value(a))?;
        Ok(self.push(value, self.requires_grad(a), Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, self.requires_grad(a), Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, self.requires_grad(a), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = T::from_f64(self.value(a).numel() as f64);
        let value = Tensor::scalar(self.value(a).sum() / n);
        self.push(value, self.requires_grad(a), Op::Mean(a))
    }

    /// Shifted PReLU with learnable input shift, negative slope, and output
    /// shift, applied per channel along the last axis:
    /// `y = x - gamma + zeta` when `x >= gamma`, else `beta * (x - gamma) + zeta`.
    pub fn rprelu(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, zeta: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let channels = *xv.shape().last().unwrap_or(&0);
        for (name, id) in [("gamma", gamma), ("beta", beta), ("zeta", zeta)] {
            let pv = self.value(id);
            if pv.shape() != [channels] {
                return Err(Error::contract(format!(
                    "rprelu {name} must have shape [{channels}], got {:?}",
                    pv.shape()
                )));
            }
        }
        let (gv, bv, zv) = (self.value(gamma), self.value(beta), self.value(zeta));
        let mut data = Vec::with_capacity(xv.numel());
        for (i, &v) in xv.data().iter().enumerate() {
            let c = i % channels;
            let shifted = v - gv.data()[c];
            let y = if shifted >= T::zero() {
                shifted
            } else {
                bv.data()[c] * shifted
            };
            data.push(y + zv.data()[c]);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            self.any_grad(&[x, gamma, beta, zeta]),
            Op::RpRelu { x, gamma, beta, zeta },
        ))
    }

    /// Mean softmax cross-entropy of rank-2 logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 {
            return Err(Error::shape("softmax_cross_entropy", lv.shape(), &[labels.len()]));
        }
        let (batch, classes) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != batch {
            return Err(Error::contract(format!(
                "softmax_cross_entropy: {} labels for batch {batch}",
                labels.len()
            )));
        }
        let mut probs = vec![T::zero(); batch * classes];
        let mut loss = 0.0f64;
        for b in 0..batch {
            if labels[b] >= classes {
                return Err(Error::contract(format!(
                    "label {} out of range for {classes} classes",
                    labels[b]
                )));
            }
            let row = &lv.data()[b * classes..(b + 1) * classes];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut denom = T::zero();
            for &v in row {
                denom += (v - max).exp();
            }
            for (j, &v) in row.iter().enumerate() {
                probs[b * classes + j] = (v - max).exp() / denom;
            }
            loss -= probs[b * classes + labels[b]].as_f64().ln();
        }
        let value = Tensor::scalar(T::from_f64(loss / batch as f64));
        let probs = Tensor::new(vec![batch, classes], probs)?;
        Ok(self.push(
            value,
            self.requires_grad(logits),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Extracts 3x3 same-padding patches from `[batch, h, w, c]` into
    /// `[batch*h*w, c*9]` rows, ready for the linear core.
    pub fn im2col(&mut self, x: NodeId, conv: ConvShape) -> Result<NodeId> {
        let xv = self.value(x);
        let expect = [conv.batch, conv.height, conv.width, conv.channels];
        if xv.shape() != expect {
            return Err(Error::shape("im2col", xv.shape(), &expect));
        }
        let value = im2col_forward(xv, conv)?;
        Ok(self.push(value, self.requires_grad(x), Op::Im2col(x, conv)))
    }

    /// Records a node whose backward is `op.backward`, used verbatim.
    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|id| self.value(*id)).collect();
        let (value, saved) = op.forward(&values)?;
        let requires_grad = self.any_grad(inputs);
        Ok(self.push(
            value,
            requires_grad,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
                saved,
            },
        ))
    }

    /// Closure form of [`Graph::custom`].
    pub fn custom_node(
        &mut self,
        name: &'static str,
        inputs: &[NodeId],
        forward: impl Fn(&[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> + 'static,
        backward: impl Fn(&[&Tensor<T>], &[Tensor<T>], &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>
            + 'static,
    ) -> Result<NodeId> {
        self.custom(
            Box::new(ClosureOp {
                name,
                fwd: Box::new(forward),
                bwd: Box::new(backward),
            }),
            inputs,
        )
    }

    /// Reverse pass from a scalar loss. Every gradient-requiring node
    /// reachable from `loss` receives a gradient; fan-out accumulates by sum.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].clone() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &upstream, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        let target = self.value(id);
        if g.shape() != target.shape() {
            return Err(Error::contract(format!(
                "gradient shape {:?} does not match tensor shape {:?}",
                g.shape(),
                target.shape()
            )));
        }
        match &mut grads[id.0] {
            Some(existing) => {
                *existing = existing.zip(&g, "grad-accumulate", |a, b| a + b)?;
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(
        &self,
        idx: usize,
        upstream: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => Ok(()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, upstream.clone())?;
                self.accumulate(grads, *b, upstream.clone())
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, upstream.clone())?;
                let cols = self.value(*bias).shape()[0];
                let mut gb = vec![T::zero(); cols];
                for (i, &g) in upstream.data().iter().enumerate() {
                    gb[i % cols] += g;
                }
                self.accumulate(grads, *bias, Tensor::new(vec![cols], gb)?)
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, upstream.clone())?;
                self.accumulate(grads, *b, upstream.map(|g| -g))
            }
            Op::Mul(a, b) => {
                let ga = upstream.zip(self.value(*b), "mul-bwd", |g, y| g * y)?;
                let gb = upstream.zip(self.value(*a), "mul-bwd", |g, x| g * x)?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                self.accumulate(grads, *a, upstream.map(|g| g * f))
            }
            Op::Matmul(a, b) => {
                // dL/dA = G * B^T, dL/dB = A^T * G
                let bt = transpose(self.value(*b))?;
                let at = transpose(self.value(*a))?;
                self.accumulate(grads, *a, matmul(upstream, &bt)?)?;
                self.accumulate(grads, *b, matmul(&at, upstream)?)
            }
            Op::Transpose(a) => self.accumulate(grads, *a, transpose(upstream)?),
            Op::Reshape(a) => {
                let back = upstream.reshape(self.value(*a).shape().to_vec())?;
                self.accumulate(grads, *a, back)
            }
            Op::Sum(a) => {
                let g = upstream.scalar_value()?;
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(shape, g))
            }
            Op::Mean(a) => {
                let n = T::from_f64(self.value(*a).numel() as f64);
                let g = upstream.scalar_value()? / n;
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(shape, g))
            }
            Op::RpRelu { x, gamma, beta, zeta } => {
                let xv = self.value(*x);
                let channels = self.value(*gamma).shape()[0];
                let (gv, bv) = (self.value(*gamma), self.value(*beta));
                let mut gx = vec![T::zero(); xv.numel()];
                let mut ggamma = vec![T::zero(); channels];
                let mut gbeta = vec![T::zero(); channels];
                let mut gzeta = vec![T::zero(); channels];
                for (i, (&v, &g)) in xv.data().iter().zip(upstream.data().iter()).enumerate() {
                    let c = i % channels;
                    let shifted = v - gv.data()[c];
                    if shifted >= T::zero() {
                        gx[i] = g;
                        ggamma[c] -= g;
                    } else {
                        gx[i] = g * bv.data()[c];
                        ggamma[c] -= g * bv.data()[c];
                        gbeta[c] += g * shifted;
                    }
                    gzeta[c] += g;
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
                self.accumulate(grads, *gamma, Tensor::new(vec![channels], ggamma)?)?;
                self.accumulate(grads, *beta, Tensor::new(vec![channels], gbeta)?)?;
                self.accumulate(grads, *zeta, Tensor::new(vec![channels], gzeta)?)
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let g = upstream.scalar_value()?;
                let (batch, classes) = (probs.shape()[0], probs.shape()[1]);
                let inv_b = T::from_f64(1.0 / batch as f64);
                let mut gl = probs.data().to_vec();
                for (b, &label) in labels.iter().enumerate() {
                    gl[b * classes + label] -= T::one();
                }
                for v in gl.iter_mut() {
                    *v = *v * g * inv_b;
                }
                self.accumulate(grads, *logits, Tensor::new(vec![batch, classes], gl)?)
            }
            Op::Im2col(x, conv) => {
                let gx = im2col_backward(upstream, *conv)?;
                self.accumulate(grads, *x, gx)
            }
            Op::Custom { inputs, op, saved } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|id| self.value(*id)).collect();
                let input_grads = op.backward(&values, saved, upstream)?;
                if input_grads.len() != inputs.len() {
                    return Err(Error::contract(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        input_grads.len(),
                        inputs.len()
                    )));
                }
                for (id, g) in inputs.iter().zip(input_grads) {
                    match g {
                        Some(g) => self.accumulate(grads, *id, g)?,
                        None => {
                            if self.nodes[id.0].requires_grad {
                                return Err(Error::contract(format!(
                                    "custom op {} is missing a backward for a gradient-requiring input",
                                    op.name()
                                )));
                            }
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

pub(crate) fn im2col_forward<T: Real>(x: &Tensor<T>, conv: ConvShape) -> Result<Tensor<T>> {
    let ConvShape { batch, height, width, channels } = conv;
    let mut out = vec![T::zero(); batch * height * width * channels * 9];
    let row_len = channels * 9;
    for b in 0..batch {
        for y in 0..height {
            for xw in 0..width {
                let row = (b * height + y) * width + xw;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        let sx = xw as isize + kx as isize - 1;
                        if sy < 0 || sy >= height as isize || sx < 0 || sx >= width as isize {
                            continue;
                        }
                        let src = ((b * height + sy as usize) * width + sx as usize) * channels;
                        for c in 0..channels {
                            out[row * row_len + c * 9 + ky * 3 + kx] = x.data()[src + c];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch * height * width, row_len], out)
}

fn im2col_backward<T: Real>(g: &Tensor<T>, conv: ConvShape) -> Result<Tensor<T>> {
    let ConvShape { batch, height, width, channels } = conv;
    let mut gx = vec![T::zero(); batch * height * width * channels];
    let row_len = channels * 9;
    for b in 0..batch {
        for y in 0..height {
            for xw in 0..width {
                let row = (b * height + y) * width + xw;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        let sx = xw as isize + kx as isize - 1;
                        if sy < 0 || sy >= height as isize || sx < 0 || sx >= width as isize {
                            continue;
                        }
                        let dst = ((b * height + sy as usize) * width + sx as usize) * channels;
                        for c in 0..channels {
                            gx[dst + c] += g.data()[row * row_len + c * 9 + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch, height, width, channels], gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    type G = Graph<f64>;

    /// Central finite difference of a scalar-valued graph function.
    fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let denom = a.abs().max(b.abs()).max(1e-12);
        (a - b).abs() / denom
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = G::new();
        let x = g.leaf(Tensor::from_slice(&[1.0, 2.0, 3.0]), true);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = G::new();
        let x = g.leaf(Tensor::from_slice(&[1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fanout_accumulates_exactly() {
        let mut g = G::new();
        let x = g.leaf(Tensor::from_slice(&[5.0]), true);
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn diamond_graph_matches_finite_difference() {
        // y = sum(x*x) + sum(3*x); split and rejoined through two branches.
        let eval = |v: f64| {
            let mut g = G::new();
            let x = g.leaf(Tensor::from_slice(&[v, 2.0 * v]), true);
            let f = g.mul(x, x).unwrap();
            let h = g.scale(x, 3.0);
            let joined = g.add(f, h).unwrap();
            let loss = g.sum(joined);
            (g, x, loss)
        };
        let (g, x, loss) = eval(0.7);
        let grads = g.backward(loss).unwrap();
        // d/dv of the full expression via its two components:
        let analytic = grads.get(x).unwrap().data()[0] + 2.0 * grads.get(x).unwrap().data()[1];
        let fd = central_diff(
            |v| {
                let (g, _, loss) = eval(v);
                g.value(loss).scalar_value().unwrap()
            },
            0.7,
            1e-5,
        );
        assert!(rel_err(analytic, fd) < 1e-5, "analytic {analytic} vs fd {fd}");
    }

    #[test]
    fn matmul_gradient_matches_finite_difference() {
        let mut rng = crate::rng::SplitMix64::new(99);
        let a0: Vec<f64> = (0..16).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let b0: Vec<f64> = (0..16).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let loss_at = |a: &[f64], b: &[f64]| {
            let mut g = G::new();
            let an = g.leaf(Tensor::new(vec![4, 4], a.to_vec()).unwrap(), true);
            let bn = g.leaf(Tensor::new(vec![4, 4], b.to_vec()).unwrap(), true);
            let c = g.matmul(an, bn).unwrap();
            let sq = g.mul(c, c).unwrap();
            let loss = g.sum(sq);
            (g, an, bn, loss)
        };
        let (g, an, bn, loss) = loss_at(&a0, &b0);
        let grads = g.backward(loss).unwrap();
        for i in 0..16 {
            for (which, base) in [(0, &a0), (1, &b0)] {
                let fd = central_diff(
                    |v| {
                        let mut pa = a0.clone();
                        let mut pb = b0.clone();
                        if which == 0 {
                            pa[i] = v;
                        } else {
                            pb[i] = v;
                        }
                        let (g, _, _, loss) = loss_at(&pa, &pb);
                        g.value(loss).scalar_value().unwrap()
                    },
                    base[i],
                    1e-5,
                );
                let analytic = if which == 0 {
                    grads.get(an).unwrap().data()[i]
                } else {
                    grads.get(bn).unwrap().data()[i]
                };
                assert!(
                    rel_err(analytic, fd) < 1e-6,
                    "entry {i} of operand {which}: {analytic} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn rprelu_and_bias_gradients_match_finite_difference() {
        let x0 = [0.8, -0.4, 0.3, -1.1, 0.6, 0.9];
        let gamma0 = [0.1, -0.2];
        let beta0 = [0.5, -0.3];
        let zeta0 = [0.05, 0.2];
        let bias0 = [0.3, -0.6];
        let build = |x: &[f64], ga: &[f64], be: &[f64], ze: &[f64], bi: &[f64]| {
            let mut g = G::new();
            let xn = g.leaf(Tensor::new(vec![3, 2], x.to_vec()).unwrap(), true);
            let gan = g.leaf(Tensor::from_slice(ga), true);
            let ben = g.leaf(Tensor::from_slice(be), true);
            let zen = g.leaf(Tensor::from_slice(ze), true);
            let bin = g.leaf(Tensor::from_slice(bi), true);
            let biased = g.add_bias(xn, bin).unwrap();
            let act = g.rprelu(biased, gan, ben, zen).unwrap();
            let sq = g.mul(act, act).unwrap();
            let loss = g.sum(sq);
            (g, [xn, gan, ben, zen, bin], loss)
        };
        let (g, ids, loss) = build(&x0, &gamma0, &beta0, &zeta0, &bias0);
        let grads = g.backward(loss).unwrap();
        let params: [&[f64]; 5] = [&x0, &gamma0, &beta0, &zeta0, &bias0];
        for (p, base) in params.iter().enumerate() {
            for i in 0..base.len() {
                let fd = central_diff(
                    |v| {
                        let mut all: Vec<Vec<f64>> = params.iter().map(|s| s.to_vec()).collect();
                        all[p][i] = v;
                        let (g, _, loss) = build(&all[0], &all[1], &all[2], &all[3], &all[4]);
                        g.value(loss).scalar_value().unwrap()
                    },
                    base[i],
                    1e-6,
                );
                let analytic = grads.get(ids[p]).unwrap().data()[i];
                assert!(
                    rel_err(analytic, fd) < 1e-5,
                    "param {p} entry {i}: {analytic} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches_finite_difference() {
        let logits0 = [1.2, -0.3, 0.4, 0.0, 2.0, -1.0];
        let labels = [2usize, 0];
        let build = |l: &[f64]| {
            let mut g = G::new();
            let ln = g.leaf(Tensor::new(vec![2, 3], l.to_vec()).unwrap(), true);
            let loss = g.softmax_cross_entropy(ln, &labels).unwrap();
            (g, ln, loss)
        };
        let (g, ln, loss) = build(&logits0);
        let grads = g.backward(loss).unwrap();
        for i in 0..6 {
            let fd = central_diff(
                |v| {
                    let mut l = logits0.to_vec();
                    l[i] = v;
                    let (g, _, loss) = build(&l);
                    g.value(loss).scalar_value().unwrap()
                },
                logits0[i],
                1e-6,
            );
            let analytic = grads.get(ln).unwrap().data()[i];
            assert!(rel_err(analytic, fd) < 1e-5, "logit {i}: {analytic} vs {fd}");
        }
    }

    #[test]
    fn im2col_gradient_matches_finite_difference() {
        let conv = ConvShape { batch: 1, height: 3, width: 3, channels: 2 };
        let mut rng = crate::rng::SplitMix64::new(5);
        let x0: Vec<f64> = (0..18).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let w0: Vec<f64> = (0..18).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let build = |x: &[f64]| {
            let mut g = G::new();
            let xn = g.leaf(Tensor::new(vec![1, 3, 3, 2], x.to_vec()).unwrap(), true);
            let cols = g.im2col(xn, conv).unwrap();
            let w = g.constant(Tensor::new(vec![18, 1], w0.clone()).unwrap());
            let y = g.matmul(cols, w).unwrap();
            let sq = g.mul(y, y).unwrap();
            let loss = g.sum(sq);
            (g, xn, loss)
        };
        let (g, xn, loss) = build(&x0);
        let grads = g.backward(loss).unwrap();
        for i in 0..18 {
            let fd = central_diff(
                |v| {
                    let mut x = x0.clone();
                    x[i] = v;
                    let (g, _, loss) = build(&x);
                    g.value(loss).scalar_value().unwrap()
                },
                x0[i],
                1e-5,
            );
            let analytic = grads.get(xn).unwrap().data()[i];
            assert!(rel_err(analytic, fd) < 1e-5, "pixel {i}: {analytic} vs {fd}");
        }
    }

    #[test]
    fn sub_mean_transpose_reshape_gradients_match_finite_difference() {
        let x0 = [0.4, -1.2, 0.9, 2.1, -0.3, 0.7];
        let build = |x: &[f64]| {
            let mut g = G::new();
            let xn = g.leaf(Tensor::new(vec![2, 3], x.to_vec()).unwrap(), true);
            let t = g.transpose(xn).unwrap();
            let r = g.reshape(t, vec![6, 1]).unwrap();
            let c = g.constant(Tensor::full(vec![6, 1], 0.25));
            let d = g.sub(r, c).unwrap();
            let sq = g.mul(d, d).unwrap();
            let loss = g.mean(sq);
            (g, xn, loss)
        };
        let (g, xn, loss) = build(&x0);
        let grads = g.backward(loss).unwrap();
        for i in 0..6 {
            let fd = central_diff(
                |v| {
                    let mut x = x0.to_vec();
                    x[i] = v;
                    let (g, _, loss) = build(&x);
                    g.value(loss).scalar_value().unwrap()
                },
                x0[i],
                1e-5,
            );
            assert!(rel_err(grads.get(xn).unwrap().data()[i], fd) < 1e-6);
        }
    }

    #[test]
    fn rprelu_special_cases() {
        let apply = |gamma: f64, beta: f64, zeta: f64, x: f64| {
            let mut g = G::new();
            let xn = g.constant(Tensor::new(vec![1, 1], vec![x]).unwrap());
            let ga = g.constant(Tensor::from_slice(&[gamma]));
            let be = g.constant(Tensor::from_slice(&[beta]));
            let ze = g.constant(Tensor::from_slice(&[zeta]));
            let y = g.rprelu(xn, ga, be, ze).unwrap();
            g.value(y).data()[0]
        };
        // gamma=0, beta=1, zeta=0 is the identity
        for x in [-2.0, -0.5, 0.0, 1.5] {
            assert_eq!(apply(0.0, 1.0, 0.0, x), x);
        }
        // gamma=0, beta=0, zeta=0 is ReLU
        assert_eq!(apply(0.0, 0.0, 0.0, -3.0), 0.0);
        assert_eq!(apply(0.0, 0.0, 0.0, 2.0), 2.0);
        // gamma=1, beta=0.5, zeta=2 at x=0: 0.5 * (0 - 1) + 2 = 1.5
        assert_eq!(apply(1.0, 0.5, 2.0, 0.0), 1.5);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut g = G::new();
        let x = g.leaf(Tensor::from_slice(&[1.0, 2.0]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn classic_ste_round_node() {
        // forward = round, backward = identity
        let mut g = G::new();
        let x = g.leaf(Tensor::from_slice(&[0.2, 0.7, 1.6]), true);
        let node = g
            .custom_node(
                "round-ste",
                &[x],
                |ins| Ok((ins[0].map(|v| v.round()), vec![])),
                |_, _, up| Ok(vec![Some(up.clone())]),
            )
            .unwrap();
        assert!(g.is_custom_gradient(node));
        assert_eq!(g.value(node).data(), &[0.0, 1.0, 2.0]);
        let loss = g.sum(node);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sign_node_with_clip_window_backward() {
        // forward = sign, backward = 1 inside (-1, 1), 0 outside
        let mut g = G::new();
        let x = g.leaf(Tensor::from_slice(&[-1.5, -0.5, 0.5, 1.5]), true);
        let node = g
            .custom_node(
                "sign-ste",
                &[x],
                |ins| {
                    Ok((
                        ins[0].map(|v| if v >= 0.0 { 1.0 } else { -1.0 }),
                        vec![],
                    ))
                },
                |ins, _, up| {
                    let mask = ins[0].zip(up, "mask", |v, g| if v.abs() < 1.0 { g } else { 0.0 })?;
                    Ok(vec![Some(mask)])
                },
            )
            .unwrap();
        let loss = g.sum(node);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn custom_node_missing_backward_is_contract_error() {
        let mut g = G::new();
        let x = g.leaf(Tensor::from_slice(&[1.0]), true);
        let node = g
            .custom_node(
                "broken",
                &[x],
                |ins| Ok((ins[0].clone(), vec![])),
                |_, _, _| Ok(vec![None]),
            )
            .unwrap();
        let loss = g.sum(node);
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn node_backward_runs_once_after_all_consumers() {
        use std::cell::Cell;
        use std::rc::Rc;
        let calls = Rc::new(Cell::new(0usize));
        let seen_upstream = Rc::new(Cell::new(0.0f64));
        let mut g = G::new();
        let x = g.leaf(Tensor::from_slice(&[2.0]), true);
        let calls_in = Rc::clone(&calls);
        let seen_in = Rc::clone(&seen_upstream);
        let node = g
            .custom_node(
                "probe",
                &[x],
                |ins| Ok((ins[0].clone(), vec![])),
                move |_, _, up| {
                    calls_in.set(calls_in.get() + 1);
                    seen_in.set(up.data()[0]);
                    Ok(vec![Some(up.clone())])
                },
            )
            .unwrap();
        // two consumers fan out from the probe node
        let a = g.scale(node, 3.0);
        let b = g.scale(node, 4.0);
        let joined = g.add(a, b).unwrap();
        let loss = g.sum(joined);
        let grads = g.backward(loss).unwrap();
        // one invocation, with both consumers' gradients already summed
        assert_eq!(calls.get(), 1);
        assert_eq!(seen_upstream.get(), 7.0);
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = crate::rng::SplitMix64::new(123);
            let mut g = G::new();
            let x = g.leaf(
                Tensor::new(vec![4, 4], (0..16).map(|_| rng.next_range(-1.0, 1.0)).collect())
                    .unwrap(),
                true,
            );
            let y = g.matmul(x, x).unwrap();
            let z = g.mul(y, y).unwrap();
            let loss = g.sum(z);
            let grads = g.backward(loss).unwrap();
            grads.get(x).unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        // bitwise identical
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
