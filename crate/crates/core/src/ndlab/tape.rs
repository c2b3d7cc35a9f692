//! Reverse-mode tape.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for the backward pass. Nodes are created in topological order, so
//! `backward` is a single reverse sweep that visits each node once.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f32 = 0.1;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        // Empty for pointwise convolutions, which read the input directly.
        cols: Vec<f32>,
    },
    LeakyRelu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Slice {
        input: Var,
        start: usize,
    },
    BceWithLogits {
        input: Var,
        target: Vec<f32>,
        weight: Vec<f32>,
    },
    SmoothL1 {
        input: Var,
        target: Vec<f32>,
        weight: Vec<f32>,
        beta: f32,
    },
    SoftmaxCe {
        input: Var,
        target: Vec<usize>,
        weight: Vec<f32>,
        probs: Vec<f32>,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: f32,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Add { .. } => "add",
            Op::Concat { .. } => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Sum { .. } => "sum",
            Op::Scale { .. } => "scale",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of a leaf; zeros if the leaf did not contribute to the root.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Borrowed gradient data, `None` for leaves that did not contribute.
    pub fn data(&self, var: Var) -> Option<&[f32]> {
        self.grads[var.0].as_deref()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn smooth_l1(d: f32, beta: f32) -> f32 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f32, beta: f32) -> f32 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_owned(dst: &mut Option<Vec<f32>>, src: Vec<f32>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf whose gradient is wanted (parameters, attacked inputs).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Zero-padded convolution of a C×H×W input with a `[C_out, C_in, k, k]`
    /// kernel; `k` ∈ {1, 3}, padding `k / 2`, stride 1 or 2.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (c, h, w) = self
            .value(input)
            .chw()
            .ok_or_else(|| Error::shape("conv2d", format!("input {:?} is not C×H×W", self.shape(input))))?;
        let (co, ci, k) = match self.shape(weight) {
            &[co, ci, kh, kw] if kh == kw => (co, ci, kh),
            s => return Err(Error::shape("conv2d", format!("weight {s:?} is not [Co, Ci, k, k]"))),
        };
        if ci != c || !(k == 1 || k == 3) || !(stride == 1 || stride == 2) {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, weight {:?}, stride {stride}", self.shape(input), self.shape(weight)),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {co} channels", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: co,
            kernel: k,
            stride,
            pad: k / 2,
        };
        let cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            kernels::im2col(self.value(input).data(), &geom)
        };
        let out = {
            let src = if geom.is_pointwise() { self.value(input).data() } else { &cols };
            kernels::conv_forward(src, self.value(weight).data(), bias.map(|b| self.value(b).data()), &geom)
        };
        let value = Tensor::new(vec![co, geom.out_h(), geom.out_w()], out)?;
        let rg = self.requires_grad(input) || self.requires_grad(weight) || bias.is_some_and(|b| self.requires_grad(b));
        // Columns are only needed for the weight gradient.
        let cols = if self.requires_grad(weight) { cols } else { Vec::new() };
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        )
    }

    pub fn leaky_relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.requires_grad(input);
        self.push(value, Op::LeakyRelu { input }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.requires_grad(input);
        self.push(value, Op::Sigmoid { input }, rg)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::shape("add", format!("{:?} + {:?}", self.shape(lhs), self.shape(rhs))));
        }
        let data = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(a, b)| a + b)
            .collect();
        let value = Tensor::new(self.shape(lhs).to_vec(), data)?;
        let rg = self.requires_grad(lhs) || self.requires_grad(rhs);
        self.push(value, Op::Add { lhs, rhs }, rg)
    }

    /// Concatenates C×H×W tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let (_, h, w) = self
            .value(*first)
            .chw()
            .ok_or_else(|| Error::shape("concat_channels", format!("{:?}", self.shape(*first))))?;
        let mut channels = 0;
        let mut data = Vec::new();
        for &v in inputs {
            match self.value(v).chw() {
                Some((c, hh, ww)) if hh == h && ww == w => {
                    channels += c;
                    data.extend_from_slice(self.value(v).data());
                }
                _ => {
                    let shapes: Vec<_> = inputs.iter().map(|&v| self.shape(v).to_vec()).collect();
                    return Err(Error::shape("concat_channels", format!("{shapes:?}")));
                }
            }
        }
        let value = Tensor::new(vec![channels, h, w], data)?;
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    /// Channels `start..end` of a C×H×W tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let (c, h, w) = self
            .value(input)
            .chw()
            .ok_or_else(|| Error::shape("slice_channels", format!("{:?}", self.shape(input))))?;
        if start >= end || end > c {
            return Err(Error::shape("slice_channels", format!("{start}..{end} of {c} channels")));
        }
        let plane = h * w;
        let data = self.value(input).data()[start * plane..end * plane].to_vec();
        let value = Tensor::new(vec![end - start, h, w], data)?;
        let rg = self.requires_grad(input);
        self.push(value, Op::Slice { input, start }, rg)
    }

    fn check_elementwise_targets(&self, op: &'static str, input: Var, target: &[f32], weight: &[f32]) -> Result<()> {
        let n = self.value(input).len();
        if target.len() != n || weight.len() != n {
            return Err(Error::shape(
                op,
                format!("input {:?}, target {}, weight {}", self.shape(input), target.len(), weight.len()),
            ));
        }
        Ok(())
    }

    /// `Σ wᵢ · BCE(σ(xᵢ), tᵢ)`, computed stably from logits.
    pub fn bce_with_logits(&mut self, input: Var, target: Vec<f32>, weight: Vec<f32>) -> Result<Var> {
        self.check_elementwise_targets("bce_with_logits", input, &target, &weight)?;
        let total: f32 = self
            .value(input)
            .data()
            .iter()
            .zip(&target)
            .zip(&weight)
            .map(|((&x, &t), &w)| w * (x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()))
            .sum();
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(total), Op::BceWithLogits { input, target, weight }, rg)
    }

    /// `Σ wᵢ · smoothL1(xᵢ − tᵢ)`, quadratic `d²/2β` below `beta` and
    /// `|d| − β/2` above.
    pub fn smooth_l1(&mut self, input: Var, target: Vec<f32>, weight: Vec<f32>, beta: f32) -> Result<Var> {
        self.check_elementwise_targets("smooth_l1", input, &target, &weight)?;
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::shape("smooth_l1", format!("transition point {beta}")));
        }
        let total: f32 = self
            .value(input)
            .data()
            .iter()
            .zip(&target)
            .zip(&weight)
            .map(|((&x, &t), &w)| w * smooth_l1(x - t, beta))
            .sum();
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(total), Op::SmoothL1 { input, target, weight, beta }, rg)
    }

    /// Softmax cross-entropy over the leading (class) axis of a `K×…` tensor:
    /// `Σ_cells w_cell · (−ln softmax(x[:, cell])[target_cell])`.
    pub fn softmax_cross_entropy(&mut self, input: Var, target: Vec<usize>, weight: Vec<f32>) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let k = *shape.first().ok_or_else(|| Error::shape("softmax_cross_entropy", "scalar input"))?;
        let cells = if k == 0 { 0 } else { self.value(input).len() / k };
        if k == 0 || target.len() != cells || weight.len() != cells || target.iter().any(|&t| t >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("input {shape:?}, {} targets, {} weights", target.len(), weight.len()),
            ));
        }
        let x = self.value(input).data();
        let mut probs = vec![0.0f32; x.len()];
        let mut total = 0.0f32;
        for cell in 0..cells {
            let max = (0..k).map(|c| x[c * cells + cell]).fold(f32::NEG_INFINITY, f32::max);
            let denom: f32 = (0..k).map(|c| (x[c * cells + cell] - max).exp()).sum();
            for c in 0..k {
                probs[c * cells + cell] = (x[c * cells + cell] - max).exp() / denom;
            }
            if weight[cell] != 0.0 {
                let logp = x[target[cell] * cells + cell] - max - denom.ln();
                total += weight[cell] * -logp;
            }
        }
        let rg = self.requires_grad(input);
        self.push(
            Tensor::scalar(total),
            Op::SoftmaxCe {
                input,
                target,
                weight,
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total: f32 = self.value(input).data().iter().sum();
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(total), Op::Sum { input }, rg)
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.requires_grad(input);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[id] = None;
            }
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                if self.requires_grad(*weight) {
                    let src = if geom.is_pointwise() { self.value(*input).data() } else { cols };
                    let gw = grads[weight.0].get_or_insert_with(|| vec![0.0; self.value(*weight).len()]);
                    kernels::conv_grad_weight(g, src, geom, gw);
                }
                if let Some(b) = bias.filter(|b| self.requires_grad(*b)) {
                    let gb = grads[b.0].get_or_insert_with(|| vec![0.0; geom.out_channels]);
                    kernels::conv_grad_bias(g, geom, gb);
                }
                if self.requires_grad(*input) {
                    let gcols = kernels::conv_grad_cols(g, self.value(*weight).data(), geom);
                    if geom.is_pointwise() {
                        add_owned(&mut grads[input.0], gcols);
                    } else {
                        let gi = grads[input.0].get_or_insert_with(|| vec![0.0; self.value(*input).len()]);
                        kernels::col2im(&gcols, geom, gi);
                    }
                }
            }
            Op::LeakyRelu { input } => {
                if self.requires_grad(*input) {
                    let x = self.value(*input).data();
                    let d: Vec<f32> = x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > 0.0 { g } else { LEAKY_SLOPE * g })
                        .collect();
                    add_owned(&mut grads[input.0], d);
                }
            }
            Op::Sigmoid { input } => {
                if self.requires_grad(*input) {
                    let y = node.value.data();
                    let d: Vec<f32> = y.iter().zip(g).map(|(&y, &g)| g * y * (1.0 - y)).collect();
                    add_owned(&mut grads[input.0], d);
                }
            }
            Op::Add { lhs, rhs } => {
                for v in [lhs, rhs] {
                    if self.requires_grad(*v) {
                        add_into(&mut grads[v.0], g);
                    }
                }
            }
            Op::Concat { inputs } => {
                let mut offset = 0;
                for v in inputs {
                    let n = self.value(*v).len();
                    if self.requires_grad(*v) {
                        add_into(&mut grads[v.0], &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Slice { input, start } => {
                if self.requires_grad(*input) {
                    let n = node.value.len();
                    let total = self.value(*input).len();
                    let offset = start * (n / node.value.shape()[0]);
                    let gi = grads[input.0].get_or_insert_with(|| vec![0.0; total]);
                    gi[offset..offset + n].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::BceWithLogits { input, target, weight } => {
                if self.requires_grad(*input) {
                    let up = g[0];
                    let d: Vec<f32> = self
                        .value(*input)
                        .data()
                        .iter()
                        .zip(target)
                        .zip(weight)
                        .map(|((&x, &t), &w)| up * w * (sigmoid(x) - t))
                        .collect();
                    add_owned(&mut grads[input.0], d);
                }
            }
            Op::SmoothL1 { input, target, weight, beta } => {
                if self.requires_grad(*input) {
                    let up = g[0];
                    let d: Vec<f32> = self
                        .value(*input)
                        .data()
                        .iter()
                        .zip(target)
                        .zip(weight)
                        .map(|((&x, &t), &w)| up * w * smooth_l1_grad(x - t, *beta))
                        .collect();
                    add_owned(&mut grads[input.0], d);
                }
            }
            Op::SoftmaxCe {
                input,
                target,
                weight,
                probs,
            } => {
                if self.requires_grad(*input) {
                    let up = g[0];
                    let cells = target.len();
                    let mut d = vec![0.0f32; probs.len()];
                    for cell in 0..cells {
                        let w = weight[cell];
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..probs.len() / cells {
                            let onehot = if c == target[cell] { 1.0 } else { 0.0 };
                            d[c * cells + cell] = up * w * (probs[c * cells + cell] - onehot);
                        }
                    }
                    add_owned(&mut grads[input.0], d);
                }
            }
            Op::Sum { input } => {
                if self.requires_grad(*input) {
                    let n = self.value(*input).len();
                    add_owned(&mut grads[input.0], vec![g[0]; n]);
                }
            }
            Op::Scale { input, factor } => {
                if self.requires_grad(*input) {
                    let d: Vec<f32> = g.iter().map(|v| v * factor).collect();
                    add_owned(&mut grads[input.0], d);
                }
            }
        }
    }
}
