//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value. Because a node
//! can only reference nodes recorded before it, the tape is topologically
//! ordered by construction and backward is a single reverse sweep.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise activation functions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
    Exp,
}

impl Activation {
    pub const DEFAULT_LEAK: f64 = 0.1;

    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::LeakyRelu(a) => {
                if v > 0.0 {
                    v
                } else {
                    a * v
                }
            }
            Activation::Sigmoid => sigmoid(v),
            Activation::Exp => v.exp(),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Exp => y,
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        geom: ConvGeom,
        // im2col patches; `None` for pointwise convs (the input is its own patch
        // matrix) and on tapes that do not record gradients.
        cols: Option<Vec<f64>>,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Upsample2x {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Select {
        input: Var,
        index: usize,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    WeightedSqErr {
        input: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
    },
    WeightedBce {
        input: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded recording of executed operations.
pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that only evaluates; [`Tape::backward`] on it yields zero gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation, such as an input image.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let kshape = self.value(kernels).shape().to_vec();
        let [cout, cin, k, k2] = kshape[..] else {
            return Err(Error::shape(
                "conv2d",
                format!("kernels must be [C_out, C_in, k, k], got {kshape:?}"),
            ));
        };
        if cin != c {
            return Err(Error::shape(
                "conv2d",
                format!("C_in: kernels expect {cin} input channels, input has {c}"),
            ));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel size: expected odd square kernel, got {k}x{k2}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride: must be positive"));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias: expected [{cout}], got {:?}", self.value(bias).shape()),
            ));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("H/W: {h}x{w} with pad {pad} smaller than kernel {k}"),
            ));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let p = ho * wo;
        let kdim = c * k * k;
        let mut out = vec![0.0; cout * p];
        for (row, &b) in out.chunks_exact_mut(p).zip(self.value(bias).data()) {
            row.fill(b);
        }
        let cols = if geom.is_pointwise() {
            kernels::gemm_acc(
                self.value(kernels).data(),
                self.value(input).data(),
                &mut out,
                cout,
                kdim,
                p,
            );
            None
        } else {
            let col = kernels::im2col(self.value(input).data(), &geom);
            kernels::gemm_acc(self.value(kernels).data(), &col, &mut out, cout, kdim, p);
            self.record.then_some(col)
        };
        let rg = self.needs(input) || self.needs(kernels) || self.needs(bias);
        let value = Tensor::new(vec![cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let x = self.value(input);
        if !x.is_finite() {
            return Err(Error::NonFinite("activation input"));
        }
        let value = x.map(|v| kind.apply(v));
        let rg = self.needs(input);
        Ok(self.push(value, Op::Activation { input, kind }, rg))
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = x.dims3()?;
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = x.at3(ch, y / 2, xx / 2);
                }
            }
        }
        let value = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Upsample2x { input }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.value(a).dims3()?;
        let (cb, hb, wb) = self.value(b).dims3()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("spatial dims differ: {ha}x{wa} vs {hb}x{wb}"),
            ));
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ca + cb, ha, wa], data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    /// Pick a single element (by flat row-major index) as a scalar.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.value(input);
        let Some(&v) = x.data().get(index) else {
            return Err(Error::shape(
                "select",
                format!("index {index} out of range for {} values", x.len()),
            ));
        };
        let rg = self.needs(input);
        Ok(self.push(Tensor::scalar(v), Op::Select { input, index }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.needs(input);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.needs(input);
        self.push(value, Op::Sum { input }, rg)
    }

    /// `Σ weight·(input − target)²`
    pub fn weighted_sq_err(&mut self, input: Var, target: Vec<f64>, weight: Vec<f64>) -> Result<Var> {
        let x = self.value(input);
        check_len("weighted_sq_err", x, &target, &weight)?;
        let total = x
            .data()
            .iter()
            .zip(&target)
            .zip(&weight)
            .map(|((&v, &t), &w)| if w == 0.0 { 0.0 } else { w * (v - t) * (v - t) })
            .sum();
        let rg = self.needs(input);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSqErr { input, target, weight }, rg))
    }

    /// `Σ weight·BCE(σ(input), target)`, evaluated stably on logits.
    pub fn weighted_bce_logits(&mut self, input: Var, target: Vec<f64>, weight: Vec<f64>) -> Result<Var> {
        let x = self.value(input);
        check_len("weighted_bce_logits", x, &target, &weight)?;
        let total = x
            .data()
            .iter()
            .zip(&target)
            .zip(&weight)
            .map(|((&v, &t), &w)| if w == 0.0 { 0.0 } else { w * bce_logit(v, t) })
            .sum();
        let rg = self.needs(input);
        Ok(self.push(Tensor::scalar(total), Op::WeightedBce { input, target, weight }, rg))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.backward_scaled(output, 1.0)
    }

    /// Backward seeded with `seed` instead of 1.
    pub fn backward_scaled(&self, output: Var, seed: f64) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("seed must be a scalar, got shape {:?}", out.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(vec![seed]);
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                cols,
            } => {
                let p = geom.ho * geom.wo;
                let cout = node.value.shape()[0];
                let kdim = geom.c * geom.k * geom.k;
                if self.needs(*bias) {
                    let gb = slot(grads, *bias, cout);
                    for (acc, row) in gb.iter_mut().zip(g.chunks_exact(p)) {
                        *acc += row.iter().sum::<f64>();
                    }
                }
                let col: &[f64] = match cols {
                    Some(c) => c,
                    None => self.value(*input).data(),
                };
                if self.needs(*kernels) {
                    let gk = slot(grads, *kernels, cout * kdim);
                    kernels::gemm_abt_acc(g, col, gk, cout, p, kdim);
                }
                if self.needs(*input) {
                    let wt = kernels::transpose(self.value(*kernels).data(), cout, kdim);
                    let n_in = geom.c * geom.h * geom.w;
                    if geom.is_pointwise() {
                        let gi = slot(grads, *input, n_in);
                        kernels::gemm_acc(&wt, g, gi, kdim, cout, p);
                    } else {
                        let mut dcol = vec![0.0; kdim * p];
                        kernels::gemm_acc(&wt, g, &mut dcol, kdim, cout, p);
                        let gi = slot(grads, *input, n_in);
                        kernels::col2im_acc(&dcol, geom, gi);
                    }
                }
            }
            Op::Activation { input, kind } => {
                if self.needs(*input) {
                    let x = self.value(*input).data();
                    let y = node.value.data();
                    let gi = slot(grads, *input, x.len());
                    for i in 0..x.len() {
                        gi[i] += g[i] * kind.derivative(x[i], y[i]);
                    }
                }
            }
            Op::Upsample2x { input } => {
                if self.needs(*input) {
                    let (c, h, w) = (node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]);
                    let (hs, ws) = (h / 2, w / 2);
                    let gi = slot(grads, *input, c * hs * ws);
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                gi[(ch * hs + y / 2) * ws + x / 2] += g[(ch * h + y) * w + x];
                            }
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let na = self.value(*a).len();
                if self.needs(*a) {
                    add_into(slot(grads, *a, na), &g[..na]);
                }
                if self.needs(*b) {
                    add_into(slot(grads, *b, g.len() - na), &g[na..]);
                }
            }
            Op::Select { input, index } => {
                if self.needs(*input) {
                    let n = self.value(*input).len();
                    slot(grads, *input, n)[*index] += g[0];
                }
            }
            Op::Scale { input, factor } => {
                if self.needs(*input) {
                    let gi = slot(grads, *input, g.len());
                    for (o, &v) in gi.iter_mut().zip(g) {
                        *o += v * factor;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Sum { input } => {
                if self.needs(*input) {
                    let n = self.value(*input).len();
                    for o in slot(grads, *input, n) {
                        *o += g[0];
                    }
                }
            }
            Op::WeightedSqErr { input, target, weight } => {
                if self.needs(*input) {
                    let x = self.value(*input).data();
                    let gi = slot(grads, *input, x.len());
                    for i in 0..x.len() {
                        if weight[i] != 0.0 {
                            gi[i] += g[0] * 2.0 * weight[i] * (x[i] - target[i]);
                        }
                    }
                }
            }
            Op::WeightedBce { input, target, weight } => {
                if self.needs(*input) {
                    let x = self.value(*input).data();
                    let gi = slot(grads, *input, x.len());
                    for i in 0..x.len() {
                        if weight[i] != 0.0 {
                            gi[i] += g[0] * weight[i] * (sigmoid(x[i]) - target[i]);
                        }
                    }
                }
            }
        }
    }
}

fn check_len(op: &'static str, x: &Tensor, target: &[f64], weight: &[f64]) -> Result<()> {
    if target.len() != x.len() || weight.len() != x.len() {
        return Err(Error::shape(
            op,
            format!(
                "input has {} values, target {}, weight {}",
                x.len(),
                target.len(),
                weight.len()
            ),
        ));
    }
    Ok(())
}

/// `−t·ln σ(x) − (1−t)·ln(1−σ(x))` without overflow.
pub(crate) fn bce_logit(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a backward sweep. Nodes the seed does not depend on read as zero.
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches node shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Borrowed raw gradient, `None` when the node received no gradient.
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}
