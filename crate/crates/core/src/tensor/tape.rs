//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]; node ids are therefore a
//! topological order. [`Tape::backward`] walks that order once, in reverse.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{param_err, shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    AvgPool {
        x: usize,
        window: usize,
    },
    Bilinear {
        x: usize,
    },
    AdaptivePool {
        x: usize,
    },
    Softmax {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Relu {
        x: usize,
    },
    Abs {
        x: usize,
    },
    Log {
        x: usize,
        eps: f64,
    },
    Affine {
        x: usize,
        scale: f64,
    },
    Binary {
        a: usize,
        b: usize,
        kind: BinaryKind,
        channel_broadcast: bool,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    Interleave {
        parts: Vec<usize>,
    },
    ChannelMax {
        x: usize,
        argmax: Vec<usize>,
    },
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros when it did not influence the output.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().as_slice()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Differentiable input.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn check_owner(&self, vars: &[Var<'_>]) {
        for v in vars {
            assert!(
                std::ptr::eq(self, v.tape),
                "variables from different tapes cannot be combined"
            );
        }
    }

    /// Channel-axis concatenation of NCHW tensors.
    pub fn concat_channels<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        self.check_owner(parts);
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = values
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?
            .dims4()?;
        let mut total_c = 0;
        for v in &values {
            let (ni, ci, hi, wi) = v.dims4()?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(shape_err!(
                    "concat expects matching N, H, W; got {:?} and {:?}",
                    values[0].shape(),
                    v.shape()
                ));
            }
            total_c += ci;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for v in &values {
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.requires(&ids);
        Ok(self.push(
            Tensor::new(vec![n, total_c, h, w], out)?,
            rg,
            Op::Concat { parts: ids },
        ))
    }

    /// Interleaves P same-shape NCHW tensors so that output channel
    /// `c·P + p` is channel `c` of part `p`.
    pub fn interleave_channels<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        self.check_owner(parts);
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let first = values
            .first()
            .ok_or_else(|| shape_err!("interleave of zero tensors"))?;
        let (n, c, h, w) = first.dims4()?;
        if let Some(bad) = values.iter().find(|v| v.shape() != first.shape()) {
            return Err(shape_err!(
                "interleave expects identical shapes; got {:?} and {:?}",
                first.shape(),
                bad.shape()
            ));
        }
        let np = values.len();
        let plane = h * w;
        let mut out = vec![0.0; n * c * np * plane];
        for b in 0..n {
            for k in 0..c {
                for (p, v) in values.iter().enumerate() {
                    let src = &v.data()[(b * c + k) * plane..][..plane];
                    out[(b * c * np + k * np + p) * plane..][..plane].copy_from_slice(src);
                }
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.requires(&ids);
        Ok(self.push(
            Tensor::new(vec![n, c * np, h, w], out)?,
            rg,
            Op::Interleave { parts: ids },
        ))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        self.check_owner(&[output]);
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                nodes[output.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let wants = |i: usize| nodes[i].requires_grad;
            let mut acc = |i: usize, contrib: Vec<f64>| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contrib) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let cg = kernels::conv2d_backward(
                        geom,
                        val(*x).data(),
                        val(*w).data(),
                        &g,
                        wants(*x),
                        wants(*w),
                    );
                    if let Some(dx) = cg.dx {
                        acc(*x, dx);
                    }
                    if let Some(dw) = cg.dw {
                        acc(*w, dw);
                    }
                    if let Some(b) = b {
                        acc(*b, cg.db);
                    }
                }
                Op::AvgPool { x, window } => {
                    acc(*x, kernels::avg_pool_window_backward(val(*x).shape(), *window, &g));
                }
                Op::Bilinear { x } => {
                    let s = node.value.shape();
                    acc(*x, kernels::bilinear_resize_backward(val(*x).shape(), s[2], s[3], &g));
                }
                Op::AdaptivePool { x } => {
                    let s = node.value.shape();
                    acc(
                        *x,
                        kernels::adaptive_avg_pool_backward(val(*x).shape(), s[2], s[3], &g),
                    );
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let s = node.value.shape();
                    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                    let mut dx = vec![0.0; y.len()];
                    for b in 0..n {
                        let base = b * c * plane;
                        for p in 0..plane {
                            let dot: f64 = (0..c)
                                .map(|k| y[base + k * plane + p] * g[base + k * plane + p])
                                .sum();
                            for k in 0..c {
                                let i = base + k * plane + p;
                                dx[i] = y[i] * (g[i] - dot);
                            }
                        }
                    }
                    acc(*x, dx);
                }
                Op::Sigmoid { x } => {
                    let y = node.value.data();
                    acc(*x, y.iter().zip(&g).map(|(y, g)| g * y * (1.0 - y)).collect());
                }
                Op::Relu { x } => {
                    let xv = val(*x).data();
                    acc(
                        *x,
                        xv.iter()
                            .zip(&g)
                            .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                }
                Op::Abs { x } => {
                    let xv = val(*x).data();
                    acc(
                        *x,
                        xv.iter()
                            .zip(&g)
                            .map(|(x, g)| {
                                if *x > 0.0 {
                                    *g
                                } else if *x < 0.0 {
                                    -*g
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                }
                Op::Log { x, eps } => {
                    let xv = val(*x).data();
                    acc(
                        *x,
                        xv.iter()
                            .zip(&g)
                            .map(|(x, g)| {
                                if *x > *eps && *x < 1.0 - *eps {
                                    g / x
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                }
                Op::Affine { x, scale } => {
                    acc(*x, g.iter().map(|g| g * scale).collect());
                }
                Op::Binary {
                    a,
                    b,
                    kind,
                    channel_broadcast,
                } => {
                    let (av, bv) = (val(*a), val(*b));
                    if *channel_broadcast {
                        let s = av.shape();
                        let c = s[1];
                        let inner: usize = s[2..].iter().product();
                        let bd = bv.data();
                        let chan = |i: usize| (i / inner) % c;
                        let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                            BinaryKind::Add | BinaryKind::Sub => {
                                let sign = if *kind == BinaryKind::Sub { -1.0 } else { 1.0 };
                                let mut gb = vec![0.0; c];
                                if wants(*b) {
                                    for (i, gi) in g.iter().enumerate() {
                                        gb[chan(i)] += sign * gi;
                                    }
                                }
                                (g.clone(), gb)
                            }
                            BinaryKind::Mul => {
                                let ad = av.data();
                                let mut gb = vec![0.0; c];
                                let ga = g
                                    .iter()
                                    .enumerate()
                                    .map(|(i, gi)| {
                                        gb[chan(i)] += gi * ad[i];
                                        gi * bd[chan(i)]
                                    })
                                    .collect();
                                (ga, gb)
                            }
                        };
                        acc(*a, ga);
                        acc(*b, gb);
                    } else {
                        match kind {
                            BinaryKind::Add => {
                                if wants(*b) {
                                    acc(*b, g.clone());
                                }
                                acc(*a, g);
                            }
                            BinaryKind::Sub => {
                                if wants(*b) {
                                    acc(*b, g.iter().map(|v| -v).collect());
                                }
                                acc(*a, g);
                            }
                            BinaryKind::Mul => {
                                if wants(*a) {
                                    acc(*a, g.iter().zip(bv.data()).map(|(g, b)| g * b).collect());
                                }
                                if wants(*b) {
                                    acc(*b, g.iter().zip(av.data()).map(|(g, a)| g * a).collect());
                                }
                            }
                        }
                    }
                }
                Op::Sum { x } => {
                    acc(*x, vec![g[0]; val(*x).numel()]);
                }
                Op::Mean { x } => {
                    let n = val(*x).numel();
                    acc(*x, vec![g[0] / n as f64; n]);
                }
                Op::Concat { parts } => {
                    let s = node.value.shape();
                    let (n, plane) = (s[0], s[2] * s[3]);
                    let total_c = s[1];
                    let mut offset = 0;
                    for &p in parts {
                        let c = val(p).shape()[1];
                        if wants(p) {
                            let mut d = Vec::with_capacity(n * c * plane);
                            for b in 0..n {
                                d.extend_from_slice(
                                    &g[(b * total_c + offset) * plane..][..c * plane],
                                );
                            }
                            acc(p, d);
                        }
                        offset += c;
                    }
                }
                Op::Interleave { parts } => {
                    let s = val(parts[0]).shape().to_vec();
                    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                    let np = parts.len();
                    for (pi, &p) in parts.iter().enumerate() {
                        if !wants(p) {
                            continue;
                        }
                        let mut d = vec![0.0; n * c * plane];
                        for b in 0..n {
                            for k in 0..c {
                                d[(b * c + k) * plane..][..plane].copy_from_slice(
                                    &g[(b * c * np + k * np + pi) * plane..][..plane],
                                );
                            }
                        }
                        acc(p, d);
                    }
                }
                Op::ChannelMax { x, argmax } => {
                    let s = val(*x).shape().to_vec();
                    let (c, plane) = (s[1], s[2] * s[3]);
                    let mut d = vec![0.0; val(*x).numel()];
                    for (i, gi) in g.iter().enumerate() {
                        let (b, p) = (i / plane, i % plane);
                        d[(b * c + argmax[i]) * plane + p] = *gi;
                    }
                    acc(*x, d);
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, self.requires_grad(), op)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value();
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| f(*x)).collect())
            .expect("map preserves shape")
    }

    /// Cross-correlation of an NCHW input with an `O×(I/groups)×k×k` weight.
    pub fn conv2d(
        &self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<'t>> {
        self.tape.check_owner(&[weight]);
        let (x, w) = (self.value(), weight.value());
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, padding, groups)?;
        let bv = match bias {
            Some(b) => {
                self.tape.check_owner(&[b]);
                let bv = b.value();
                if bv.shape() != [geom.cout] {
                    return Err(shape_err!(
                        "conv2d bias must have shape [{}], got {:?}",
                        geom.cout,
                        bv.shape()
                    ));
                }
                Some(bv)
            }
            None => None,
        };
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), bv.as_deref().map(Tensor::data));
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let rg = self.tape.requires(&ids);
        Ok(self.tape.push(
            Tensor::new(geom.out_shape(), out)?,
            rg,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            },
        ))
    }

    pub fn avg_pool_window(&self, window: usize) -> Result<Var<'t>> {
        let out = kernels::avg_pool_window(&self.value(), window)?;
        Ok(self.unary(out, Op::AvgPool { x: self.id, window }))
    }

    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let out = kernels::bilinear_resize(&self.value(), out_h, out_w)?;
        Ok(self.unary(out, Op::Bilinear { x: self.id }))
    }

    pub fn adaptive_avg_pool(&self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let out = kernels::adaptive_avg_pool(&self.value(), out_h, out_w)?;
        Ok(self.unary(out, Op::AdaptivePool { x: self.id }))
    }

    pub fn softmax_channel(&self) -> Result<Var<'t>> {
        let out = kernels::softmax_channel(&self.value())?;
        Ok(self.unary(out, Op::Softmax { x: self.id }))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let out = self.map(kernels::sigmoid_scalar);
        self.unary(out, Op::Sigmoid { x: self.id })
    }

    pub fn relu(&self) -> Var<'t> {
        let out = self.map(|v| v.max(0.0));
        self.unary(out, Op::Relu { x: self.id })
    }

    pub fn abs(&self) -> Var<'t> {
        let out = self.map(f64::abs);
        self.unary(out, Op::Abs { x: self.id })
    }

    /// `ln(clamp(x, eps, 1 − eps))`. Inputs must be non-negative.
    pub fn log(&self, eps: f64) -> Result<Var<'t>> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(param_err!("log clamp eps must lie in (0, 0.5), got {}", eps));
        }
        let v = self.value();
        if let Some(bad) = v.data().iter().find(|x| !(**x >= 0.0)) {
            return Err(Error::Contract(format!(
                "log expects non-negative input, found {}",
                bad
            )));
        }
        let out = self.map(|x| x.clamp(eps, 1.0 - eps).ln());
        Ok(self.unary(out, Op::Log { x: self.id, eps }))
    }

    /// `scale·x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Var<'t> {
        let out = self.map(|v| scale * v + shift);
        self.unary(out, Op::Affine { x: self.id, scale })
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let out = self.map(|v| s * v);
        self.unary(out, Op::Affine { x: self.id, scale: s })
    }

    fn binary(&self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        self.tape.check_owner(&[other]);
        let (a, b) = (self.value(), other.value());
        let broadcast = if a.shape() == b.shape() {
            false
        } else if a.shape().len() >= 2 && b.shape() == [a.shape()[1]] {
            true
        } else {
            return Err(shape_err!(
                "cannot combine {:?} with {:?} (only equal shapes or a per-channel vector)",
                a.shape(),
                b.shape()
            ));
        };
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data: Vec<f64> = if broadcast {
            let c = a.shape()[1];
            let inner: usize = a.shape()[2..].iter().product();
            a.data()
                .iter()
                .enumerate()
                .map(|(i, x)| f(*x, b.data()[(i / inner) % c]))
                .collect()
        } else {
            a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(
            Tensor::new(a.shape().to_vec(), data)?,
            rg,
            Op::Binary {
                a: self.id,
                b: other.id,
                kind,
                channel_broadcast: broadcast,
            },
        ))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn sum(&self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum { x: self.id })
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.unary(Tensor::scalar(s), Op::Mean { x: self.id })
    }

    /// Per-pixel maximum over channels (`N×1×H×W`); ties go to the lowest channel.
    pub fn channel_max(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (n, c, h, w) = v.dims4()?;
        let plane = h * w;
        let mut out = vec![0.0; n * plane];
        let mut argmax = vec![0; n * plane];
        for b in 0..n {
            for p in 0..plane {
                let mut best = 0;
                for k in 1..c {
                    if v.data()[(b * c + k) * plane + p] > v.data()[(b * c + best) * plane + p] {
                        best = k;
                    }
                }
                out[b * plane + p] = v.data()[(b * c + best) * plane + p];
                argmax[b * plane + p] = best;
            }
        }
        Ok(self.unary(
            Tensor::new(vec![n, 1, h, w], out)?,
            Op::ChannelMax { x: self.id, argmax },
        ))
    }
}
