//! Reverse-mode differentiation over an append-only operation record.
//!
//! Every operation appends one node holding its output value. Because nodes
//! can only refer to earlier nodes, walking the record from the loss back to
//! index 0 visits nodes in reverse topological order.

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor, LOG_FLOOR};
use crate::error::{Error, Result};

/// Label value excluded from every pixel reduction.
pub const IGNORE_LABEL: u8 = 255;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<R: Real> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<u8>,
    },
    Upsample(Var),
    Softmax(Var),
    SliceChannels {
        input: Var,
        count: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<R>,
        labels: Vec<u8>,
        valid: usize,
    },
    Nll {
        probs: Var,
        labels: Vec<u8>,
        valid: usize,
    },
    NegEntropy(Var),
}

#[derive(Debug)]
struct Node<R: Real> {
    value: Tensor<R>,
    op: Op<R>,
}

/// The recorded computation of one forward pass.
///
/// A tape is single-owner: build it on one thread, run [`Tape::backward`],
/// read the gradients, drop or [`Tape::clear`] it.
#[derive(Debug)]
pub struct Tape<R: Real = f32> {
    nodes: Vec<Node<R>>,
    track_regime: bool,
    regime: u64,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_regime: false,
            regime: FNV_OFFSET,
        }
    }

    /// A tape that fingerprints every piecewise branch taken (ReLU signs,
    /// pooling winners, log clamps). Finite-difference checks compare the
    /// fingerprint to detect perturbations that cross a kink.
    pub fn with_regime_tracking() -> Self {
        Self {
            track_regime: true,
            ..Self::new()
        }
    }

    pub fn regime(&self) -> u64 {
        self.regime
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.regime = FNV_OFFSET;
    }

    /// Resets every gradient buffer without dropping nodes.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
    }

    fn mix(&mut self, bits: impl IntoIterator<Item = u64>) {
        if !self.track_regime {
            return;
        }
        for b in bits {
            self.regime ^= b;
            self.regime = self.regime.wrapping_mul(FNV_PRIME);
        }
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, inputs: &[Var]) -> Var {
        let requires = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        let value = value.with_requires_grad(requires);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(&self, var: Var, op: &str) -> Result<Var> {
        if self.nodes[var.0].value.is_finite() {
            Ok(var)
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    /// Records an input tensor; its `requires_grad` flag decides whether
    /// gradients are accumulated for it.
    pub fn leaf(&mut self, tensor: Tensor<R>) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable tensor.
    pub fn param(&mut self, tensor: Tensor<R>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records a tensor that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor<R>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, var: Var) -> &Tensor<R> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Gradient accumulated by the last [`Tape::backward`] call, if any reached `var`.
    pub fn grad(&self, var: Var) -> Option<&[R]> {
        self.nodes[var.0].value.grad()
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn grad_or_zero(&self, var: Var) -> Vec<R> {
        self.grad(var)
            .map(<[R]>::to_vec)
            .unwrap_or_else(|| vec![R::zero(); self.value(var).numel()])
    }

    /// Moves a node's value (including its gradient) out of the tape.
    pub fn take(&mut self, var: Var) -> Tensor<R> {
        let n = &mut self.nodes[var.0].value;
        std::mem::replace(n, Tensor::scalar(R::zero()))
    }

    fn rank4(&self, var: Var, op: &'static str, what: &str) -> Result<[usize; 4]> {
        let s = self.shape(var);
        if s.len() != 4 {
            return Err(Error::dim(op, format!("{what} must be rank 4 [B,C,H,W], got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Cross-correlation of `[B,C,H,W]` with `[Co,C,k,k]` plus a per-channel bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let [b, c, h, w] = self.rank4(input, OP, "input")?;
        let [co, ci, kh, kw] = self.rank4(weight, OP, "kernel")?;
        if ci != c {
            return Err(Error::dim(
                OP,
                format!("input axis 1 (channels = {c}) != kernel axis 1 (channels = {ci})"),
            ));
        }
        if kh != kw {
            return Err(Error::dim(OP, format!("kernel axes 2 and 3 differ ({kh} vs {kw})")));
        }
        if kh % 2 == 0 {
            return Err(Error::dim(OP, format!("kernel axis 2 must be odd, got {kh}")));
        }
        if self.shape(bias) != [co] {
            return Err(Error::dim(
                OP,
                format!(
                    "bias axis 0 ({:?}) != kernel axis 0 (out channels = {co})",
                    self.shape(bias)
                ),
            ));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Contract(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        if h + 2 * pad < kh || w + 2 * pad < kh {
            return Err(Error::dim(
                OP,
                format!("input axes 2,3 ({h}x{w}) smaller than kernel {kh} with pad {pad}"),
            ));
        }
        let geom = ConvGeom {
            batch: b,
            cin: c,
            h,
            w,
            cout: co,
            k: kh,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kh) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let t = Tensor::from_parts(vec![b, co, geom.ho, geom.wo], out);
        let v = self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        );
        self.check_finite(v, OP)
    }

    /// Affine map `[B,F]·[F,G] + [G]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "dense";
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::dim(
                OP,
                format!("input {xs:?} and weight {ws:?} must both be rank 2"),
            ));
        }
        if xs[1] != ws[0] {
            return Err(Error::dim(
                OP,
                format!("input axis 1 ({}) != weight axis 0 ({})", xs[1], ws[0]),
            ));
        }
        if self.shape(bias) != [ws[1]] {
            return Err(Error::dim(
                OP,
                format!("bias {:?} != weight axis 1 ({})", self.shape(bias), ws[1]),
            ));
        }
        let (b, f, g) = (xs[0], xs[1], ws[1]);
        let mut out = vec![R::zero(); b * g];
        R::gemm(
            b,
            f,
            g,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            false,
            &mut out,
            false,
        );
        let bias_v = self.value(bias).data();
        for row in out.chunks_exact_mut(g) {
            for (o, &bv) in row.iter_mut().zip(bias_v) {
                *o += bv;
            }
        }
        let v = self.push(
            Tensor::from_parts(vec![b, g], out),
            Op::Dense { input, weight, bias },
            &[input, weight, bias],
        );
        self.check_finite(v, OP)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let out: Vec<R> = src
            .data()
            .iter()
            .map(|&v| if v > R::zero() { v } else { R::zero() })
            .collect();
        let shape = src.shape().to_vec();
        if self.track_regime {
            let bits: Vec<u64> = src
                .data()
                .chunks(64)
                .map(|c| {
                    c.iter()
                        .enumerate()
                        .fold(0u64, |acc, (i, &v)| acc | (((v > R::zero()) as u64) << i))
                })
                .collect();
            self.mix(bits);
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Relu(x), &[x]))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "maxpool2x2";
        let [b, c, h, w] = self.rank4(x, OP, "input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(OP, format!("spatial axes 2,3 must be even, got {h}x{w}")));
        }
        let (out, argmax) = kernels::maxpool2x2_forward(self.value(x).data(), b * c, h, w);
        if self.track_regime {
            let bits: Vec<u64> = argmax
                .chunks(32)
                .map(|c| {
                    c.iter()
                        .enumerate()
                        .fold(0u64, |acc, (i, &a)| acc | ((a as u64) << (2 * i)))
                })
                .collect();
            self.mix(bits);
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, c, h / 2, w / 2], out),
            Op::MaxPool { input: x, argmax },
            &[x],
        ))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.rank4(x, "upsample_nearest2x", "input")?;
        let out = kernels::upsample2x_forward(self.value(x).data(), b * c, h, w);
        Ok(self.push(Tensor::from_parts(vec![b, c, 2 * h, 2 * w], out), Op::Upsample(x), &[x]))
    }

    /// Per-pixel softmax across axis 1 of a `[B,C,H,W]` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "softmax_channels";
        let [b, c, h, w] = self.rank4(x, OP, "input")?;
        if !self.value(x).is_finite() {
            return Err(Error::NonFinite(format!("{OP} input")));
        }
        let out = kernels::softmax_channels(self.value(x).data(), b, c, h * w);
        let v = self.push(Tensor::from_parts(vec![b, c, h, w], out), Op::Softmax(x), &[x]);
        self.check_finite(v, OP)
    }

    /// Keeps the first `count` channels of a `[B,C,H,W]` tensor.
    pub fn slice_channels(&mut self, x: Var, count: usize) -> Result<Var> {
        const OP: &str = "slice_channels";
        let [b, c, h, w] = self.rank4(x, OP, "input")?;
        if count == 0 || count > c {
            return Err(Error::dim(OP, format!("cannot keep {count} of {c} channels on axis 1")));
        }
        if count == c {
            return Ok(x);
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * count * plane);
        for bi in 0..b {
            out.extend_from_slice(&src[bi * c * plane..(bi * c + count) * plane]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, count, h, w], out),
            Op::SliceChannels { input: x, count },
            &[x],
        ))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("operand shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<R> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<R> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: R) -> Var {
        let out: Vec<R> = self.value(x).data().iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = R::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    fn check_labels(&self, scores: Var, labels: &[u8], op: &'static str) -> Result<(usize, usize, usize, usize)> {
        let [b, k, h, w] = self.rank4(scores, op, "scores")?;
        if labels.len() != b * h * w {
            return Err(Error::dim(
                op,
                format!(
                    "labels hold {} values, scores {:?} need B*H*W = {}",
                    labels.len(),
                    self.shape(scores),
                    b * h * w
                ),
            ));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l != IGNORE_LABEL && l as usize >= k {
                return Err(Error::Data {
                    sample: i / (h * w),
                    detail: format!("label {l} out of range for {k} classes"),
                });
            }
        }
        Ok((b, k, h, w))
    }

    /// Mean over labelled pixels of `−ln max(softmax(logits)[true], 1e-12)`.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let (b, k, h, w) = self.check_labels(logits, labels, OP)?;
        if !self.value(logits).is_finite() {
            return Err(Error::NonFinite(format!("{OP} logits")));
        }
        let plane = h * w;
        let probs = kernels::softmax_channels(self.value(logits).data(), b, k, plane);
        let (loss, valid, clamps) = nll_value(&probs, labels, k, plane);
        self.mix(clamps);
        let v = self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                valid,
            },
            &[logits],
        );
        self.check_finite(v, OP)
    }

    /// Mean over labelled pixels of `−ln max(p[true], 1e-12)` for a tensor of
    /// per-pixel probabilities.
    pub fn nll_probs(&mut self, probs: Var, labels: &[u8]) -> Result<Var> {
        const OP: &str = "nll";
        let (_, k, h, w) = self.check_labels(probs, labels, OP)?;
        let (loss, valid, clamps) = nll_value(self.value(probs).data(), labels, k, h * w);
        self.mix(clamps);
        let v = self.push(
            Tensor::scalar(loss),
            Op::Nll {
                probs,
                labels: labels.to_vec(),
                valid,
            },
            &[probs],
        );
        self.check_finite(v, OP)
    }

    /// Mean over batch and pixels of `Σ_c p_c ln max(p_c, 1e-12)`.
    pub fn neg_entropy(&mut self, probs: Var) -> Result<Var> {
        const OP: &str = "neg_entropy";
        let [b, _, h, w] = self.rank4(probs, OP, "probabilities")?;
        let floor = R::from_f64_lossy(LOG_FLOOR);
        let mut s = R::zero();
        let mut clamps = Vec::new();
        for (i, &p) in self.value(probs).data().iter().enumerate() {
            let clamped = p <= floor;
            if self.track_regime && clamped {
                clamps.push(i as u64);
            }
            s += p * if clamped { floor.ln() } else { p.ln() };
        }
        self.mix(clamps);
        let n = R::from_usize(b * h * w).unwrap_or_else(R::one);
        let v = self.push(Tensor::scalar(s / n), Op::NegEntropy(probs), &[probs]);
        self.check_finite(v, OP)
    }

    /// Back-propagates from a one-element `loss`, replacing every gradient
    /// buffer on the tape. Gradients of tensors used several times add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.zero_grad();
        if !self.value(loss).requires_grad() {
            return Ok(());
        }
        self.nodes[loss.0]
            .value
            .set_grad(vec![R::one()])
            .expect("scalar gradient");
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let gout = match node.value.grad() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&node.op, &node.value, gout, before);
        }
        Ok(())
    }
}

fn nll_value<R: Real>(probs: &[R], labels: &[u8], k: usize, plane: usize) -> (R, usize, Vec<u64>) {
    let floor = R::from_f64_lossy(LOG_FLOOR);
    let mut s = R::zero();
    let mut valid = 0usize;
    let mut clamps = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        let (b, px) = (i / plane, i % plane);
        let p = probs[(b * k + l as usize) * plane + px];
        valid += 1;
        if p <= floor {
            clamps.push(i as u64);
            s -= floor.ln();
        } else {
            s -= p.ln();
        }
    }
    let loss = if valid == 0 {
        R::zero()
    } else {
        s / R::from_usize(valid).unwrap_or_else(R::one)
    };
    (loss, valid, clamps)
}

fn accumulate<R: Real>(nodes: &mut [Node<R>], var: Var, delta: Vec<R>) {
    let t = &mut nodes[var.0].value;
    if !t.requires_grad() {
        return;
    }
    match t.grad_slot() {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn wants<R: Real>(nodes: &[Node<R>], var: Var) -> bool {
    nodes[var.0].value.requires_grad()
}

fn backprop_node<R: Real>(op: &Op<R>, out: &Tensor<R>, gout: &[R], nodes: &mut [Node<R>]) {
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let mut dw = vec![R::zero(); nodes[weight.0].value.numel()];
            let mut db = vec![R::zero(); geom.cout];
            let dx = kernels::conv2d_backward(
                geom,
                nodes[input.0].value.data(),
                nodes[weight.0].value.data(),
                gout,
                &mut dw,
                &mut db,
                wants(nodes, *input),
            );
            accumulate(nodes, *weight, dw);
            accumulate(nodes, *bias, db);
            if let Some(dx) = dx {
                accumulate(nodes, *input, dx);
            }
        }
        Op::Dense { input, weight, bias } => {
            let xs = nodes[input.0].value.shape().to_vec();
            let g = nodes[weight.0].value.shape()[1];
            let (b, f) = (xs[0], xs[1]);
            let mut dw = vec![R::zero(); f * g];
            R::gemm(f, b, g, nodes[input.0].value.data(), true, gout, false, &mut dw, false);
            let mut db = vec![R::zero(); g];
            for row in gout.chunks_exact(g) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            if wants(nodes, *input) {
                let mut dx = vec![R::zero(); b * f];
                R::gemm(b, g, f, gout, false, nodes[weight.0].value.data(), true, &mut dx, false);
                accumulate(nodes, *input, dx);
            }
            accumulate(nodes, *weight, dw);
            accumulate(nodes, *bias, db);
        }
        Op::Relu(x) => {
            if wants(nodes, *x) {
                let dx = out
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&y, &g)| if y > R::zero() { g } else { R::zero() })
                    .collect();
                accumulate(nodes, *x, dx);
            }
        }
        Op::MaxPool { input, argmax } => {
            if wants(nodes, *input) {
                let s = nodes[input.0].value.shape();
                let dx = kernels::maxpool2x2_backward(gout, argmax, s[0] * s[1], s[2], s[3]);
                accumulate(nodes, *input, dx);
            }
        }
        Op::Upsample(x) => {
            if wants(nodes, *x) {
                let s = nodes[x.0].value.shape();
                let dx = kernels::upsample2x_backward(gout, s[0] * s[1], s[2], s[3]);
                accumulate(nodes, *x, dx);
            }
        }
        Op::Softmax(x) => {
            if wants(nodes, *x) {
                let s = out.shape();
                let dx = kernels::softmax_channels_backward(out.data(), gout, s[0], s[1], s[2] * s[3]);
                accumulate(nodes, *x, dx);
            }
        }
        Op::SliceChannels { input, count } => {
            if wants(nodes, *input) {
                let s = nodes[input.0].value.shape().to_vec();
                let plane = s[2] * s[3];
                let mut dx = vec![R::zero(); s.iter().product()];
                for b in 0..s[0] {
                    dx[b * s[1] * plane..(b * s[1] + count) * plane]
                        .copy_from_slice(&gout[b * count * plane..(b + 1) * count * plane]);
                }
                accumulate(nodes, *input, dx);
            }
        }
        Op::Add(a, b) => {
            if wants(nodes, *a) {
                accumulate(nodes, *a, gout.to_vec());
            }
            if wants(nodes, *b) {
                accumulate(nodes, *b, gout.to_vec());
            }
        }
        Op::Mul(a, b) => {
            if wants(nodes, *a) {
                let d = nodes[b.0].value.data().iter().zip(gout).map(|(&y, &g)| y * g).collect();
                accumulate(nodes, *a, d);
            }
            if wants(nodes, *b) {
                let d = nodes[a.0].value.data().iter().zip(gout).map(|(&x, &g)| x * g).collect();
                accumulate(nodes, *b, d);
            }
        }
        Op::Scale(x, factor) => {
            if wants(nodes, *x) {
                accumulate(nodes, *x, gout.iter().map(|&g| g * *factor).collect());
            }
        }
        Op::Sum(x) => {
            if wants(nodes, *x) {
                let n = nodes[x.0].value.numel();
                accumulate(nodes, *x, vec![gout[0]; n]);
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            labels,
            valid,
        } => {
            if !wants(nodes, *logits) || *valid == 0 {
                return;
            }
            let s = nodes[logits.0].value.shape().to_vec();
            let (k, plane) = (s[1], s[2] * s[3]);
            let floor = R::from_f64_lossy(LOG_FLOOR);
            let scale = gout[0] / R::from_usize(*valid).unwrap_or_else(R::one);
            let mut dx = vec![R::zero(); probs.len()];
            for (i, &l) in labels.iter().enumerate() {
                if l == IGNORE_LABEL {
                    continue;
                }
                let (b, px) = (i / plane, i % plane);
                let t = (b * k + l as usize) * plane + px;
                if probs[t] <= floor {
                    continue;
                }
                for c in 0..k {
                    let idx = (b * k + c) * plane + px;
                    dx[idx] = probs[idx] * scale;
                }
                dx[t] -= scale;
            }
            accumulate(nodes, *logits, dx);
        }
        Op::Nll { probs, labels, valid } => {
            if !wants(nodes, *probs) || *valid == 0 {
                return;
            }
            let s = nodes[probs.0].value.shape().to_vec();
            let (k, plane) = (s[1], s[2] * s[3]);
            let floor = R::from_f64_lossy(LOG_FLOOR);
            let scale = gout[0] / R::from_usize(*valid).unwrap_or_else(R::one);
            let p = nodes[probs.0].value.data();
            let mut dx = vec![R::zero(); p.len()];
            for (i, &l) in labels.iter().enumerate() {
                if l == IGNORE_LABEL {
                    continue;
                }
                let (b, px) = (i / plane, i % plane);
                let t = (b * k + l as usize) * plane + px;
                if p[t] > floor {
                    dx[t] = -scale / p[t];
                }
            }
            accumulate(nodes, *probs, dx);
        }
        Op::NegEntropy(x) => {
            if wants(nodes, *x) {
                let s = nodes[x.0].value.shape();
                let n = R::from_usize(s[0] * s[2] * s[3]).unwrap_or_else(R::one);
                let floor = R::from_f64_lossy(LOG_FLOOR);
                let scale = gout[0] / n;
                let dx = nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .map(|&p| {
                        if p <= floor {
                            floor.ln() * scale
                        } else {
                            (p.ln() + R::one()) * scale
                        }
                    })
                    .collect();
                accumulate(nodes, *x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[3], vec![0.5, -1.0, 2.0]));
        let l = tape.sum(w);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn reused_tensor_accumulates() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], vec![1.0, -2.0]));
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn zeroed_tape_reports_zero_gradients() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], vec![1.0, 2.0]));
        let l = tape.sum(w);
        tape.backward(l).unwrap();
        tape.zero_grad();
        assert_eq!(tape.grad_or_zero(w), vec![0.0, 0.0]);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], vec![1.0, 2.0]));
        let w = tape.param(t(&[2], vec![3.0, 4.0]));
        let p = tape.mul(x, w).unwrap();
        let l = tape.sum(p);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn elementwise_ops() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let x = tape.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let p = tape.maxpool2x2(x).unwrap();
        assert_eq!(tape.value(p).data(), &[4.0]);

        let x = tape.constant(t(&[1, 1, 1, 1], vec![5.0]));
        let u = tape.upsample_nearest2x(x).unwrap();
        assert_eq!(tape.value(u).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(u).data(), &[5.0; 4]);
    }

    #[test]
    fn odd_pooling_extent_is_a_dimension_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 4]).unwrap());
        assert!(matches!(tape.maxpool2x2(x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 1, 1]).unwrap());
        let p = tape.softmax_channels(x).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = tape.constant(t(&[1, 2, 1, 1], vec![1000.0, 1000.0]));
        let p = tape.softmax_channels(x).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[1, 2, 1, 1], vec![0.0, 3f64.ln()]));
        let p = tape.softmax_channels(x).unwrap();
        let d = tape.value(p).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[1, 2, 1, 1], vec![f32::NAN, 0.0]).unwrap());
        assert!(matches!(tape.softmax_channels(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn conv_channel_mismatch_names_axes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]).unwrap());
        let w = tape.param(Tensor::zeros(&[2, 4, 3, 3]).unwrap());
        let b = tape.param(Tensor::zeros(&[2]).unwrap());
        let err = tape.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
    }

    #[test]
    fn dense_hand_example() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], vec![1.0, 2.0]));
        let w = tape.param(t(&[2, 2], vec![3.0, 0.0, 0.0, 3.0]));
        let b = tape.param(t(&[2], vec![1.0, 1.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 7.0]);
        let bad = tape.constant(t(&[1, 3], vec![0.0; 3]));
        assert!(matches!(tape.dense(bad, w, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn label_out_of_range_names_sample() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 1, 2]).unwrap());
        let err = tape.cross_entropy_logits(x, &[0, 1, 2, 7]).unwrap_err();
        assert!(matches!(err, Error::Data { sample: 1, .. }), "{err}");
    }
}
