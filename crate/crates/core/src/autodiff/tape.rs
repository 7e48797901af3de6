//! Computation record and reverse pass.
//!
//! A [`Tape`] owns every value produced during one forward evaluation.
//! Operations return [`Var`] handles; [`Tape::backward`] walks the record in
//! reverse creation order, which is a valid reverse topological order since
//! a node can only reference earlier nodes.

use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::{self, ConvGeom};
use super::scalar::{gemm, MatRef};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Add(usize, usize),
    AddChannels {
        x: usize,
        b: usize,
    },
    Mul(usize, usize),
    Scale(usize, S),
    Silu(usize),
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        /// (mean, 1/std) per (sample, group)
        stats: Vec<(S, S)>,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Upsample2x(usize),
    Concat(usize, usize),
    Mean(usize),
    SpatialMean(usize),
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    Mse(usize, usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Group-norm stabilizer added to the variance.
pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
pub struct Tape<S> {
    id: u64,
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Records a trainable leaf; it receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[self.index(v).expect("var from another tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.index(v).expect("var from another tape")].requires_grad
    }

    /// Gradient of the last backward pass, present only for leaves that
    /// require a gradient and were reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        let i = self.index(v).ok()?;
        if !self.nodes[i].requires_grad || !matches!(self.nodes[i].op, Op::Leaf) {
            return None;
        }
        self.grads.get(i)?.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<S>> {
        let g = self.grad(v)?;
        Some(Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad matches value shape"))
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract(
                "variable was not recorded on this tape".into(),
            ));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        let index = self.nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor<S> {
        &self.nodes[i].value
    }

    // ---------------------------------------------------------------------
    // Operators
    // ---------------------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (x, w) = (self.index(input)?, self.index(kernel)?);
        let b = bias.map(|b| self.index(b)).transpose()?;
        let geom = ConvGeom::new(
            self.val(x).shape(),
            self.val(w).shape(),
            b.map(|b| self.val(b).shape()),
            stride,
            padding,
        )?;
        let out = conv::forward(&geom, self.val(x), self.val(w), b.map(|b| self.val(b)));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, rg, Op::Conv2d { x, w, b, geom }))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        self.same_shape("add", a, b)?;
        let out = zip_map(self.val(a), self.val(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// Adds `b` of shape `[N, C]` or `[C]` to every spatial position of
    /// `x` of shape `[N, C, H, W]`.
    pub fn add_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let (x, b) = (self.index(x)?, self.index(b)?);
        let xs = self.val(x).shape();
        let bs = self.val(b).shape();
        let ok = xs.len() == 4
            && ((bs.len() == 2 && bs[0] == xs[0] && bs[1] == xs[1])
                || (bs.len() == 1 && bs[0] == xs[1]));
        if !ok {
            return Err(Error::shape("add_channels", xs, bs));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let per_sample = bs.len() == 2;
        let bd = self.val(b).data();
        let mut out = self.val(x).clone();
        for i in 0..n {
            for ch in 0..c {
                let bv = bd[if per_sample { i * c + ch } else { ch }];
                for v in &mut out.data_mut()[(i * c + ch) * hw..][..hw] {
                    *v += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, rg, Op::AddChannels { x, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.val(a), self.val(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let x = self.index(x)?;
        let out = self.val(x).map(|v| v * c);
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Scale(x, c)))
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let x = self.index(x)?;
        let out = self.val(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Silu(x)))
    }

    /// Group normalization over `[N, C, H, W]` with per-channel affine
    /// parameters `gamma`, `beta` of shape `[C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (x, gamma, beta) = (self.index(x)?, self.index(gamma)?, self.index(beta)?);
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Contract(format!(
                "group_norm expects [N, C, H, W], got {xs:?}"
            )));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::Contract(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        for p in [gamma, beta] {
            if self.val(p).shape() != [c] {
                return Err(Error::shape(
                    "group_norm (affine)",
                    &xs,
                    self.val(p).shape(),
                ));
            }
        }
        let cpg = c / groups;
        let len = cpg * hw;
        let eps = S::of(GROUP_NORM_EPS);
        let inv_len = S::one() / S::of(len as f64);
        let xd = self.val(x).data();
        let (gd, bd) = (self.val(gamma).data(), self.val(beta).data());
        let mut out = vec![S::zero(); xd.len()];
        let mut stats = Vec::with_capacity(n * groups);
        for i in 0..n {
            for g in 0..groups {
                let off = (i * c + g * cpg) * hw;
                let chunk = &xd[off..off + len];
                let mean = chunk.iter().copied().sum::<S>() * inv_len;
                let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_len;
                let rstd = S::one() / (var + eps).sqrt();
                stats.push((mean, rstd));
                for cc in 0..cpg {
                    let ch = g * cpg + cc;
                    let (gm, bt) = (gd[ch], bd[ch]);
                    let o = off + cc * hw;
                    for (dst, &src) in out[o..o + hw].iter_mut().zip(&xd[o..o + hw]) {
                        *dst = (src - mean) * rstd * gm + bt;
                    }
                }
            }
        }
        let out = Tensor::new(xs, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            rg,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
        ))
    }

    /// `y = x w^T + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (x, w) = (self.index(x)?, self.index(w)?);
        let b = b.map(|b| self.index(b)).transpose()?;
        let xs = self.val(x).shape();
        let ws = self.val(w).shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", xs, ws));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.val(b).shape() != [fout] {
                return Err(Error::shape("linear (bias)", ws, self.val(b).shape()));
            }
        }
        let mut out = vec![S::zero(); n * fout];
        if let Some(b) = b {
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(self.val(b).data());
            }
        }
        gemm(
            MatRef::new(self.val(x).data(), n, fin),
            MatRef::new(self.val(w).data(), fout, fin).t(),
            if b.is_some() { S::one() } else { S::zero() },
            &mut out,
        );
        let out = Tensor::new([n, fout], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, rg, Op::Linear { x, w, b }))
    }

    pub fn upsample_nearest_2x(&mut self, x: Var) -> Result<Var> {
        let x = self.index(x)?;
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Contract(format!(
                "upsample expects [N, C, H, W], got {xs:?}"
            )));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let xd = self.val(x).data();
        let mut out = vec![S::zero(); planes * 4 * h * w];
        for p in 0..planes {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new([xs[0], xs[1], 2 * h, 2 * w], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Upsample2x(x)))
    }

    /// Channel-wise concatenation of `[N, Ca, H, W]` and `[N, Cb, H, W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        let (as_, bs) = (self.val(a).shape(), self.val(b).shape());
        if as_.len() != 4 || bs.len() != 4 || as_[0] != bs[0] || as_[2..] != bs[2..] {
            return Err(Error::shape("concat_channels", as_, bs));
        }
        let (n, ca, cb, hw) = (as_[0], as_[1], bs[1], as_[2] * as_[3]);
        let shape = [n, ca + cb, as_[2], as_[3]];
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&self.val(a).data()[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&self.val(b).data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Concat(a, b)))
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let x = self.index(x)?;
        let xd = self.val(x).data();
        let m = xd.iter().copied().sum::<S>() / S::of(xd.len() as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(m), rg, Op::Mean(x)))
    }

    /// Global average pool: `[N, C, H, W]` to `[N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let x = self.index(x)?;
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Contract(format!(
                "spatial_mean expects [N, C, H, W], got {xs:?}"
            )));
        }
        let hw = xs[2] * xs[3];
        let inv = S::one() / S::of(hw as f64);
        let out: Vec<S> = self
            .val(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<S>() * inv)
            .collect();
        let out = Tensor::new([xs[0], xs[1]], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::SpatialMean(x)))
    }

    /// Softmax across the channel axis of `[N, C, H, W]`.
    pub fn softmax_over_channels(&mut self, x: Var) -> Result<Var> {
        let x = self.index(x)?;
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Contract(format!(
                "softmax expects [N, C, H, W], got {xs:?}"
            )));
        }
        let out = Tensor::new(xs.clone(), channel_softmax(self.val(x).data(), &xs))?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Softmax(x)))
    }

    /// Mean over pixels of `-log softmax(logits)[target]`; `targets` holds
    /// one class index per `(n, y, x)` position in row-major order.
    pub fn cross_entropy_per_pixel(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let logits = self.index(logits)?;
        let xs = self.val(logits).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Contract(format!(
                "cross_entropy expects [N, C, H, W] logits, got {xs:?}"
            )));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if targets.len() != n * hw {
            return Err(Error::shape(
                "cross_entropy (targets)",
                &xs,
                &[targets.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Contract(format!(
                "cross_entropy target {bad} out of range for {c} classes"
            )));
        }
        let probs = channel_softmax(self.val(logits).data(), &xs);
        let mut total = S::zero();
        for i in 0..n {
            for p in 0..hw {
                let pr = probs[(i * c + targets[i * hw + p]) * hw + p];
                total -= pr.max(S::min_positive_value()).ln();
            }
        }
        let loss = total / S::of((n * hw) as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean squared difference, as a rank-0 tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        self.same_shape("mse", a, b)?;
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        let sum: S = ad.iter().zip(bd).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let m = sum / S::of(ad.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(m), rg, Op::Mse(a, b)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let x = self.index(x)?;
        let out = self.val(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::shape(op, self.val(a).shape(), self.val(b).shape()));
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // Reverse pass
    // ---------------------------------------------------------------------

    /// Populates gradients of `loss` with respect to every reachable leaf
    /// that requires a gradient, replacing gradients of earlier passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.run_backward(loss, false)
    }

    /// Like [`Tape::backward`] but adds onto gradients from earlier passes.
    pub fn backward_accumulate(&mut self, loss: Var) -> Result<()> {
        self.run_backward(loss, true)
    }

    fn run_backward(&mut self, loss: Var, accumulate: bool) -> Result<()> {
        let root = self.index(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = std::mem::take(&mut self.grads);
        grads.resize_with(self.nodes.len(), || None);
        if !accumulate {
            grads.iter_mut().for_each(|g| *g = None);
        }
        // Non-leaf gradients never survive a pass, so accumulation only
        // carries over leaf gradients.
        let mut fresh: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root].requires_grad {
            fresh[root] = Some(vec![S::one()]);
        }
        for i in (0..=root).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = fresh[i].take() else { continue };
            self.backward_node(i, &g, &mut fresh);
        }
        for (i, g) in fresh.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad {
                    accumulate_into(&mut grads[i], g);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[S], acc: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = conv::backward(
                    geom,
                    self.val(*x),
                    self.val(*w),
                    g,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                self.give(acc, *x, gx);
                self.give(acc, *w, gw);
                if let Some(b) = b {
                    self.give(acc, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    self.give(acc, *a, Some(g.to_vec()));
                }
                if self.rg(*b) {
                    self.give(acc, *b, Some(g.to_vec()));
                }
            }
            Op::AddChannels { x, b } => {
                if self.rg(*x) {
                    self.give(acc, *x, Some(g.to_vec()));
                }
                if self.rg(*b) {
                    let xs = self.val(*x).shape();
                    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let per_sample = self.val(*b).rank() == 2;
                    let mut gb = vec![S::zero(); self.val(*b).numel()];
                    for s in 0..n {
                        for ch in 0..c {
                            let sum: S = g[(s * c + ch) * hw..][..hw].iter().copied().sum();
                            gb[if per_sample { s * c + ch } else { ch }] += sum;
                        }
                    }
                    self.give(acc, *b, Some(gb));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let gb: Vec<S> = g
                        .iter()
                        .zip(self.val(*b).data())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.give(acc, *a, Some(gb));
                }
                if self.rg(*b) {
                    let ga: Vec<S> = g
                        .iter()
                        .zip(self.val(*a).data())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.give(acc, *b, Some(ga));
                }
            }
            Op::Scale(x, c) => {
                self.give(acc, *x, Some(g.iter().map(|&v| v * *c).collect()));
            }
            Op::Silu(x) => {
                let gx = g
                    .iter()
                    .zip(self.val(*x).data())
                    .map(|(&g, &v)| {
                        let s = sigmoid(v);
                        g * s * (S::one() + v * (S::one() - s))
                    })
                    .collect();
                self.give(acc, *x, Some(gx));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => self.group_norm_backward(*x, *gamma, *beta, *groups, stats, g, acc),
            Op::Linear { x, w, b } => {
                let xs = self.val(*x).shape();
                let (n, fin) = (xs[0], xs[1]);
                let fout = self.val(*w).shape()[0];
                let gy = MatRef::new(g, n, fout);
                if self.rg(*x) {
                    let mut gx = vec![S::zero(); n * fin];
                    gemm(
                        gy,
                        MatRef::new(self.val(*w).data(), fout, fin),
                        S::zero(),
                        &mut gx,
                    );
                    self.give(acc, *x, Some(gx));
                }
                if self.rg(*w) {
                    let mut gw = vec![S::zero(); fout * fin];
                    gemm(
                        gy.t(),
                        MatRef::new(self.val(*x).data(), n, fin),
                        S::zero(),
                        &mut gw,
                    );
                    self.give(acc, *w, Some(gw));
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    let mut gb = vec![S::zero(); fout];
                    for row in g.chunks(fout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.give(acc, b, Some(gb));
                }
            }
            Op::Upsample2x(x) => {
                let xs = self.val(*x).shape();
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let mut gx = vec![S::zero(); planes * h * w];
                for p in 0..planes {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                self.give(acc, *x, Some(gx));
            }
            Op::Concat(a, b) => {
                let (as_, bs) = (self.val(*a).shape(), self.val(*b).shape());
                let (n, ca, cb, hw) = (as_[0], as_[1], bs[1], as_[2] * as_[3]);
                let stride = (ca + cb) * hw;
                if self.rg(*a) {
                    let ga = (0..n)
                        .flat_map(|i| g[i * stride..i * stride + ca * hw].iter().copied())
                        .collect();
                    self.give(acc, *a, Some(ga));
                }
                if self.rg(*b) {
                    let gb = (0..n)
                        .flat_map(|i| g[i * stride + ca * hw..(i + 1) * stride].iter().copied())
                        .collect();
                    self.give(acc, *b, Some(gb));
                }
            }
            Op::Mean(x) => {
                let numel = self.val(*x).numel();
                let v = g[0] / S::of(numel as f64);
                self.give(acc, *x, Some(vec![v; numel]));
            }
            Op::SpatialMean(x) => {
                let xs = self.val(*x).shape();
                let hw = xs[2] * xs[3];
                let inv = S::one() / S::of(hw as f64);
                let gx = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, hw))
                    .collect();
                self.give(acc, *x, Some(gx));
            }
            Op::Softmax(x) => {
                let xs = self.val(*x).shape();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let y = node.value.data();
                let mut gx = vec![S::zero(); y.len()];
                for s in 0..n {
                    for p in 0..hw {
                        let idx = |ch: usize| (s * c + ch) * hw + p;
                        let dot: S = (0..c).map(|ch| g[idx(ch)] * y[idx(ch)]).sum();
                        for ch in 0..c {
                            gx[idx(ch)] = y[idx(ch)] * (g[idx(ch)] - dot);
                        }
                    }
                }
                self.give(acc, *x, Some(gx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let xs = self.val(*logits).shape();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let scale = g[0] / S::of((n * hw) as f64);
                let mut gx: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for s in 0..n {
                    for p in 0..hw {
                        gx[(s * c + targets[s * hw + p]) * hw + p] -= scale;
                    }
                }
                self.give(acc, *logits, Some(gx));
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                let k = g[0] * S::of(2.0) / S::of(ad.len() as f64);
                let diff: Vec<S> = ad.iter().zip(bd).map(|(&x, &y)| (x - y) * k).collect();
                if self.rg(*b) {
                    self.give(acc, *b, Some(diff.iter().map(|&v| -v).collect()));
                }
                if self.rg(*a) {
                    self.give(acc, *a, Some(diff));
                }
            }
            Op::Reshape(x) => self.give(acc, *x, Some(g.to_vec())),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        stats: &[(S, S)],
        g: &[S],
        acc: &mut [Option<Vec<S>>],
    ) {
        let xs = self.val(x).shape();
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let cpg = c / groups;
        let len = cpg * hw;
        let xd = self.val(x).data();
        let gd = self.val(gamma).data();
        let mut ggamma = vec![S::zero(); c];
        let mut gbeta = vec![S::zero(); c];
        let mut gx = self.rg(x).then(|| vec![S::zero(); xd.len()]);
        let inv_len = S::one() / S::of(len as f64);
        for s in 0..n {
            for grp in 0..groups {
                let (mean, rstd) = stats[s * groups + grp];
                let off = (s * c + grp * cpg) * hw;
                // sums of dxhat and dxhat * xhat over the group
                let mut sum_d = S::zero();
                let mut sum_dx = S::zero();
                for cc in 0..cpg {
                    let ch = grp * cpg + cc;
                    let o = off + cc * hw;
                    let mut gg = S::zero();
                    let mut gb = S::zero();
                    for p in 0..hw {
                        let xhat = (xd[o + p] - mean) * rstd;
                        let dy = g[o + p];
                        gg += dy * xhat;
                        gb += dy;
                        let d = dy * gd[ch];
                        sum_d += d;
                        sum_dx += d * xhat;
                    }
                    ggamma[ch] += gg;
                    gbeta[ch] += gb;
                }
                if let Some(gx) = gx.as_mut() {
                    for cc in 0..cpg {
                        let ch = grp * cpg + cc;
                        let o = off + cc * hw;
                        for p in 0..hw {
                            let xhat = (xd[o + p] - mean) * rstd;
                            let d = g[o + p] * gd[ch];
                            gx[o + p] = rstd * (d - (sum_d + xhat * sum_dx) * inv_len);
                        }
                    }
                }
            }
        }
        self.give(acc, x, gx);
        if self.rg(gamma) {
            self.give(acc, gamma, Some(ggamma));
        }
        if self.rg(beta) {
            self.give(acc, beta, Some(gbeta));
        }
    }

    fn give(&self, acc: &mut [Option<Vec<S>>], target: usize, g: Option<Vec<S>>) {
        if let Some(g) = g {
            if self.nodes[target].requires_grad {
                accumulate_into(&mut acc[target], g);
            }
        }
    }
}

fn accumulate_into<S: Scalar>(slot: &mut Option<Vec<S>>, g: Vec<S>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("operands share a shape")
}

fn sigmoid<S: Scalar>(v: S) -> S {
    v.sigmoid()
}

fn channel_softmax<S: Scalar>(x: &[S], shape: &[usize]) -> Vec<S> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![S::zero(); x.len()];
    for s in 0..n {
        for p in 0..hw {
            let idx = |ch: usize| (s * c + ch) * hw + p;
            let max = (0..c).map(|ch| x[idx(ch)]).fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for ch in 0..c {
                let e = (x[idx(ch)] - max).exp();
                out[idx(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                out[idx(ch)] /= z;
            }
        }
    }
    out
}
