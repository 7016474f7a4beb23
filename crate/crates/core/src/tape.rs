//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is a Wengert list: every operation appends one node holding
//! the output tensor and a record of how it was produced. Inputs always
//! precede outputs, so a single reverse sweep over the node list visits
//! each node exactly once and accumulates exact gradients.
//!
//! Conventions, stated once and tested:
//! - convolution is cross-correlation (no kernel flip),
//! - broadcasting is right-aligned, NumPy style,
//! - every operation checks its output for NaN/infinity and fails rather
//!   than storing non-finite values,
//! - a tape belongs to one training step; parameters are registered fresh
//!   each step and their gradients read back after [`Tape::backward`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_shapes, broadcast_strides, for_broadcast, zip_broadcast, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, S),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, S, S),
    Matmul(Var, Var),
    Transpose2d(Var),
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    AvgPool2d { input: Var, win_h: usize, win_w: usize, stride: usize },
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    LogSumExpAxis(Var, usize),
    SoftmaxAxis(Var, usize),
    LogSoftmaxAxis(Var, usize),
    Reshape(Var),
    BroadcastTo(Var),
    SliceRows { input: Var, start: usize },
    SpatialToRows(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Recording tape. One per training step; never shared between runs.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a constant input. No gradient will be accumulated for it.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push_leaf(t.with_requires_grad(false))
    }

    /// Register a trainable parameter (snapshot; the tape owns its copy).
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push_leaf(t.with_requires_grad(true))
    }

    fn push_leaf(&mut self, value: Tensor<S>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].value.item()
    }

    /// Gradient of the last [`Tape::backward`] target w.r.t. `v`, if any
    /// flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    /// Gradient for a required-grad node, zeros if nothing flowed to it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<S> {
        match self.nodes[v.0].value.grad() {
            Some(g) => g.to_vec(),
            None => vec![S::zero(); self.nodes[v.0].value.numel()],
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push_op(&mut self, op: &'static str, shape: Vec<usize>, data: Vec<S>, record: Op<S>, requires: bool) -> Result<Var> {
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let value = Tensor::new(shape, data)?.with_requires_grad(requires);
        let id = self.nodes.len();
        self.nodes.push(Node { value, op: record });
        Ok(Var(id))
    }

    // ── elementwise binary ops (broadcasting) ───────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        record: Op<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shapes(va.shape(), vb.shape())?;
        let n: usize = shape.iter().product::<usize>().max(1);
        let mut out = vec![S::zero(); n];
        if va.shape() == vb.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(va.data()).zip(vb.data()) {
                *o = f(x, y);
            }
        } else {
            let sa = broadcast_strides(va.shape(), &shape);
            let sb = broadcast_strides(vb.shape(), &shape);
            let (da, db) = (va.data(), vb.data());
            zip_broadcast(&shape, &sa, &sb, |flat, ia, ib| out[flat] = f(da[ia], db[ib]));
        }
        let req = self.requires(a) || self.requires(b);
        self.push_op(name, shape, out, record, req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    // ── scalar and unary ops ────────────────────────────────────────────

    pub fn add_scalar(&mut self, a: Var, c: S) -> Result<Var> {
        let data = self.nodes[a.0].value.data().iter().map(|&x| x + c).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let req = self.requires(a);
        self.push_op("add_scalar", shape, data, Op::AddScalar(a), req)
    }

    pub fn mul_scalar(&mut self, a: Var, c: S) -> Result<Var> {
        let data = self.nodes[a.0].value.data().iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let req = self.requires(a);
        self.push_op("mul_scalar", shape, data, Op::MulScalar(a, c), req)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -S::one())
    }

    fn unary(&mut self, name: &'static str, a: Var, record: Op<S>, f: impl Fn(S) -> S) -> Result<Var> {
        let data = self.nodes[a.0].value.data().iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let req = self.requires(a);
        self.push_op(name, shape, data, record, req)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| if x > S::zero() { x } else { S::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), |x| {
            // Split by sign so exp never overflows.
            if x >= S::zero() {
                S::one() / (S::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (S::one() + e)
            }
        })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a), |x| x.ln())
    }

    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Result<Var> {
        if lo > hi {
            return Err(Error::Config(format!("clamp bounds inverted: [{lo}, {hi}]")));
        }
        self.unary("clamp", a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        let req = self.requires(a) || self.requires(b);
        self.push_op("matmul", vec![m, n], out, Op::Matmul(a, b), req)
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let s = va.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose2d of rank-{} tensor", s.len())));
        }
        let (m, n) = (s[0], s[1]);
        let src = va.data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let req = self.requires(a);
        self.push_op("transpose2d", vec![n, m], out, Op::Transpose2d(a), req)
    }

    // ── convolution and pooling ─────────────────────────────────────────

    /// 2-D cross-correlation: input `[B,C,H,W]`, kernel `[O,C,kh,kw]`.
    /// Output spatial size is `floor((H + 2p - kh)/s) + 1`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (vi, vk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let (si, sk) = (vi.shape(), vk.shape());
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::Dimension(format!("conv2d wants 4-d input and kernel, got {si:?}, {sk:?}")));
        }
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, ck, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if ck != c {
            return Err(Error::Dimension(format!("conv2d channels: input {c}, kernel {ck}")));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let h_out = (h + 2 * padding - kh) / stride + 1;
        let w_out = (w + 2 * padding - kw) / stride + 1;
        let out = conv2d_raw(vi.data(), vk.data(), b, c, h, w, o, kh, kw, stride, padding, h_out, w_out);
        let req = self.requires(input) || self.requires(kernel);
        self.push_op(
            "conv2d",
            vec![b, o, h_out, w_out],
            out,
            Op::Conv2d { input, kernel, stride, padding },
            req,
        )
    }

    /// Average pooling without padding. `win = (height, width)`.
    pub fn avgpool2d(&mut self, input: Var, win: (usize, usize), stride: usize) -> Result<Var> {
        if stride == 0 || win.0 == 0 || win.1 == 0 {
            return Err(Error::Config("avgpool2d window and stride must be positive".into()));
        }
        let vi = &self.nodes[input.0].value;
        let s = vi.shape();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("avgpool2d wants 4-d input, got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (wh, ww) = win;
        if wh > h || ww > w {
            return Err(Error::Dimension(format!("avgpool2d window {wh}x{ww} exceeds input {h}x{w}")));
        }
        let h_out = (h - wh) / stride + 1;
        let w_out = (w - ww) / stride + 1;
        let src = vi.data();
        let inv = S::from_f64_lossy(1.0 / (wh * ww) as f64);
        let mut out = vec![S::zero(); b * c * h_out * w_out];
        for bi in 0..b {
            for ci in 0..c {
                let plane = (bi * c + ci) * h * w;
                let oplane = (bi * c + ci) * h_out * w_out;
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = S::zero();
                        for dy in 0..wh {
                            let row = plane + (oh * stride + dy) * w + ow * stride;
                            for dx in 0..ww {
                                acc += src[row + dx];
                            }
                        }
                        out[oplane + oh * w_out + ow] = acc * inv;
                    }
                }
            }
        }
        let req = self.requires(input);
        self.push_op(
            "avgpool2d",
            vec![b, c, h_out, w_out],
            out,
            Op::AvgPool2d { input, win_h: wh, win_w: ww, stride },
            req,
        )
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let mut acc = S::zero();
        for &x in self.nodes[a.0].value.data() {
            acc += x;
        }
        let req = self.requires(a);
        self.push_op("sum_all", vec![], vec![acc], Op::SumAll(a), req)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel();
        let mut acc = S::zero();
        for &x in self.nodes[a.0].value.data() {
            acc += x;
        }
        let req = self.requires(a);
        self.push_op("mean_all", vec![], vec![acc / S::from_f64_lossy(n as f64)], Op::MeanAll(a), req)
    }

    fn axis_split(&self, a: Var, axis: usize, op: &str) -> Result<(usize, usize, usize, Vec<usize>)> {
        let shape = self.nodes[a.0].value.shape();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("{op}: axis {axis} out of range for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok((outer, len, inner, out_shape))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner, out_shape) = self.axis_split(a, axis, "sum_axis")?;
        let src = self.nodes[a.0].value.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += src[base + i];
                }
            }
        }
        let req = self.requires(a);
        self.push_op("sum_axis", out_shape, out, Op::SumAxis(a, axis), req)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner, out_shape) = self.axis_split(a, axis, "mean_axis")?;
        let src = self.nodes[a.0].value.data();
        let inv = S::from_f64_lossy(1.0 / len as f64);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += src[base + i];
                }
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let req = self.requires(a);
        self.push_op("mean_axis", out_shape, out, Op::MeanAxis(a, axis), req)
    }

    /// Max-shifted stable `log(sum(exp(x)))` along `axis`; exact on constant
    /// input.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner, out_shape) = self.axis_split(a, axis, "logsumexp")?;
        let src = self.nodes[a.0].value.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut m = src[(o * len) * inner + i];
                for j in 1..len {
                    m = m.max(src[(o * len + j) * inner + i]);
                }
                let mut acc = S::zero();
                for j in 0..len {
                    acc += (src[(o * len + j) * inner + i] - m).exp();
                }
                out[o * inner + i] = m + acc.ln();
            }
        }
        let req = self.requires(a);
        self.push_op("logsumexp", out_shape, out, Op::LogSumExpAxis(a, axis), req)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner, _) = self.axis_split(a, axis, "softmax")?;
        let shape = self.nodes[a.0].value.shape().to_vec();
        let src = self.nodes[a.0].value.data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut m = src[(o * len) * inner + i];
                for j in 1..len {
                    m = m.max(src[(o * len + j) * inner + i]);
                }
                let mut acc = S::zero();
                for j in 0..len {
                    let e = (src[(o * len + j) * inner + i] - m).exp();
                    out[(o * len + j) * inner + i] = e;
                    acc += e;
                }
                for j in 0..len {
                    out[(o * len + j) * inner + i] = out[(o * len + j) * inner + i] / acc;
                }
            }
        }
        let req = self.requires(a);
        self.push_op("softmax", shape, out, Op::SoftmaxAxis(a, axis), req)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner, _) = self.axis_split(a, axis, "log_softmax")?;
        let shape = self.nodes[a.0].value.shape().to_vec();
        let src = self.nodes[a.0].value.data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut m = src[(o * len) * inner + i];
                for j in 1..len {
                    m = m.max(src[(o * len + j) * inner + i]);
                }
                let mut acc = S::zero();
                for j in 0..len {
                    acc += (src[(o * len + j) * inner + i] - m).exp();
                }
                let lse = m + acc.ln();
                for j in 0..len {
                    out[(o * len + j) * inner + i] = src[(o * len + j) * inner + i] - lse;
                }
            }
        }
        let req = self.requires(a);
        self.push_op("log_softmax", shape, out, Op::LogSoftmaxAxis(a, axis), req)
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let va = &self.nodes[a.0].value;
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || expect != va.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} to {shape:?}",
                va.shape()
            )));
        }
        let data = va.data().to_vec();
        let req = self.requires(a);
        self.push_op("reshape", shape, data, Op::Reshape(a), req)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let target = shape.into();
        let va = &self.nodes[a.0].value;
        let joint = broadcast_shapes(va.shape(), &target)?;
        if joint != target {
            return Err(Error::Dimension(format!(
                "cannot broadcast {:?} to {target:?}",
                va.shape()
            )));
        }
        let strides = broadcast_strides(va.shape(), &target);
        let n: usize = target.iter().product::<usize>().max(1);
        let src = va.data();
        let mut out = vec![S::zero(); n];
        for_broadcast(&target, &strides, |flat, i| out[flat] = src[i]);
        let req = self.requires(a);
        self.push_op("broadcast_to", target, out, Op::BroadcastTo(a), req)
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape();
        if shape.is_empty() || start >= end || end > shape[0] {
            return Err(Error::Dimension(format!(
                "slice_rows {start}..{end} of shape {shape:?}"
            )));
        }
        let row: usize = shape[1..].iter().product();
        let data = va.data()[start * row..end * row].to_vec();
        let mut out_shape = shape.to_vec();
        out_shape[0] = end - start;
        let req = self.requires(a);
        self.push_op("slice_rows", out_shape, data, Op::SliceRows { input: a, start }, req)
    }

    /// Permute `[B,C,h,w]` into per-location rows `[B*h*w, C]`, row order
    /// `(b, y, x)`.
    pub fn spatial_to_rows(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let s = va.shape();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("spatial_to_rows wants 4-d input, got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = va.data();
        let mut out = vec![S::zero(); src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[((bi * h + y) * w + x) * c + ci] = src[((bi * c + ci) * h + y) * w + x];
                    }
                }
            }
        }
        let req = self.requires(a);
        self.push_op("spatial_to_rows", vec![b * h * w, c], out, Op::SpatialToRows(a), req)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients on every
    /// upstream node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        *self.nodes[loss.0].value.grad_mut() = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].value.grad().is_none() || !self.nodes[idx].value.requires_grad() {
                continue;
            }
            let op = self.nodes[idx].op;
            self.backward_op(idx, op);
        }
        for node in &self.nodes[..=loss.0] {
            if let Some(g) = node.value.grad() {
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[S]) {
        if self.nodes[v.0].value.requires_grad() {
            self.nodes[v.0].value.accumulate_grad(delta);
        }
    }

    fn backward_op(&mut self, idx: usize, op: Op<S>) {
        let d_out = self.nodes[idx].value.grad().expect("gradient present").to_vec();
        match op {
            Op::Leaf => {}

            Op::Add(a, b) => {
                self.backward_binary(idx, a, b, &d_out, |d, _, _| d, |d, _, _| d);
            }
            Op::Sub(a, b) => {
                self.backward_binary(idx, a, b, &d_out, |d, _, _| d, |d, _, _| -d);
            }
            Op::Mul(a, b) => {
                self.backward_binary(idx, a, b, &d_out, |d, _, y| d * y, |d, x, _| d * x);
            }
            Op::Div(a, b) => {
                self.backward_binary(idx, a, b, &d_out, |d, _, y| d / y, |d, x, y| -d * x / (y * y));
            }

            Op::AddScalar(a) => self.accumulate(a, &d_out),
            Op::MulScalar(a, c) => {
                let d: Vec<S> = d_out.iter().map(|&g| g * c).collect();
                self.accumulate(a, &d);
            }

            Op::Relu(a) => {
                let d: Vec<S> = d_out
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                    .collect();
                self.accumulate(a, &d);
            }
            Op::Sigmoid(a) => {
                let d: Vec<S> = d_out
                    .iter()
                    .zip(self.nodes[idx].value.data())
                    .map(|(&g, &y)| g * y * (S::one() - y))
                    .collect();
                self.accumulate(a, &d);
            }
            Op::Exp(a) => {
                let d: Vec<S> = d_out
                    .iter()
                    .zip(self.nodes[idx].value.data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                self.accumulate(a, &d);
            }
            Op::Log(a) => {
                let d: Vec<S> = d_out
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(&g, &x)| g / x)
                    .collect();
                self.accumulate(a, &d);
            }
            Op::Clamp(a, lo, hi) => {
                let d: Vec<S> = d_out
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(&g, &x)| if x > lo && x < hi { g } else { S::zero() })
                    .collect();
                self.accumulate(a, &d);
            }

            Op::Matmul(a, b) => {
                let sa = self.nodes[a.0].value.shape().to_vec();
                let sb = self.nodes[b.0].value.shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let a_data = self.nodes[a.0].value.data().to_vec();
                let b_data = self.nodes[b.0].value.data().to_vec();
                if self.nodes[a.0].value.requires_grad() {
                    // dA = dC · Bᵀ
                    let mut d_a = vec![S::zero(); m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = d_out[i * n + j];
                            for p in 0..k {
                                d_a[i * k + p] += g * b_data[p * n + j];
                            }
                        }
                    }
                    self.accumulate(a, &d_a);
                }
                if self.nodes[b.0].value.requires_grad() {
                    // dB = Aᵀ · dC
                    let mut d_b = vec![S::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = a_data[i * k + p];
                            for j in 0..n {
                                d_b[p * n + j] += av * d_out[i * n + j];
                            }
                        }
                    }
                    self.accumulate(b, &d_b);
                }
            }
            Op::Transpose2d(a) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let (m, n) = (s[0], s[1]);
                let mut d = vec![S::zero(); m * n];
                for j in 0..n {
                    for i in 0..m {
                        d[i * n + j] = d_out[j * m + i];
                    }
                }
                self.accumulate(a, &d);
            }

            Op::Conv2d { input, kernel, stride, padding } => {
                self.backward_conv2d(idx, input, kernel, stride, padding, &d_out);
            }
            Op::AvgPool2d { input, win_h, win_w, stride } => {
                let s = self.nodes[input.0].value.shape().to_vec();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let so = self.nodes[idx].value.shape().to_vec();
                let (h_out, w_out) = (so[2], so[3]);
                let inv = S::from_f64_lossy(1.0 / (win_h * win_w) as f64);
                let mut d = vec![S::zero(); b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        let plane = (bi * c + ci) * h * w;
                        let oplane = (bi * c + ci) * h_out * w_out;
                        for oh in 0..h_out {
                            for ow in 0..w_out {
                                let g = d_out[oplane + oh * w_out + ow] * inv;
                                for dy in 0..win_h {
                                    let row = plane + (oh * stride + dy) * w + ow * stride;
                                    for dx in 0..win_w {
                                        d[row + dx] += g;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(input, &d);
            }

            Op::SumAll(a) => {
                let g = d_out[0];
                let d = vec![g; self.nodes[a.0].value.numel()];
                self.accumulate(a, &d);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.numel();
                let g = d_out[0] * S::from_f64_lossy(1.0 / n as f64);
                let d = vec![g; n];
                self.accumulate(a, &d);
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = self.axis_dims(a, axis);
                let mut d = vec![S::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        for i in 0..inner {
                            d[base + i] = d_out[o * inner + i];
                        }
                    }
                }
                self.accumulate(a, &d);
            }
            Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = self.axis_dims(a, axis);
                let inv = S::from_f64_lossy(1.0 / len as f64);
                let mut d = vec![S::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        for i in 0..inner {
                            d[base + i] = d_out[o * inner + i] * inv;
                        }
                    }
                }
                self.accumulate(a, &d);
            }
            Op::LogSumExpAxis(a, axis) => {
                let (outer, len, inner) = self.axis_dims(a, axis);
                let src = self.nodes[a.0].value.data().to_vec();
                let lse = self.nodes[idx].value.data().to_vec();
                let mut d = vec![S::zero(); src.len()];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        for i in 0..inner {
                            let soft = (src[base + i] - lse[o * inner + i]).exp();
                            d[base + i] = d_out[o * inner + i] * soft;
                        }
                    }
                }
                self.accumulate(a, &d);
            }
            Op::SoftmaxAxis(a, axis) => {
                let (outer, len, inner) = self.axis_dims(a, axis);
                let y = self.nodes[idx].value.data().to_vec();
                let mut d = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = S::zero();
                        for j in 0..len {
                            let p = (o * len + j) * inner + i;
                            dot += d_out[p] * y[p];
                        }
                        for j in 0..len {
                            let p = (o * len + j) * inner + i;
                            d[p] = y[p] * (d_out[p] - dot);
                        }
                    }
                }
                self.accumulate(a, &d);
            }
            Op::LogSoftmaxAxis(a, axis) => {
                let (outer, len, inner) = self.axis_dims(a, axis);
                let y = self.nodes[idx].value.data().to_vec();
                let mut d = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut total = S::zero();
                        for j in 0..len {
                            total += d_out[(o * len + j) * inner + i];
                        }
                        for j in 0..len {
                            let p = (o * len + j) * inner + i;
                            d[p] = d_out[p] - y[p].exp() * total;
                        }
                    }
                }
                self.accumulate(a, &d);
            }

            Op::Reshape(a) => self.accumulate(a, &d_out),
            Op::BroadcastTo(a) => {
                let src_shape = self.nodes[a.0].value.shape().to_vec();
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let d = crate::tensor::reduce_to_shape(&d_out, &out_shape, &src_shape);
                self.accumulate(a, &d);
            }
            Op::SliceRows { input, start } => {
                let shape = self.nodes[input.0].value.shape().to_vec();
                let row: usize = shape[1..].iter().product();
                let mut d = vec![S::zero(); self.nodes[input.0].value.numel()];
                d[start * row..start * row + d_out.len()].copy_from_slice(&d_out);
                self.accumulate(input, &d);
            }
            Op::SpatialToRows(a) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let mut d = vec![S::zero(); b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                d[((bi * c + ci) * h + y) * w + x] =
                                    d_out[((bi * h + y) * w + x) * c + ci];
                            }
                        }
                    }
                }
                self.accumulate(a, &d);
            }
        }
    }

    fn axis_dims(&self, a: Var, axis: usize) -> (usize, usize, usize) {
        let shape = self.nodes[a.0].value.shape();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    fn backward_binary(
        &mut self,
        idx: usize,
        a: Var,
        b: Var,
        d_out: &[S],
        fa: impl Fn(S, S, S) -> S,
        fb: impl Fn(S, S, S) -> S,
    ) {
        let out_shape = self.nodes[idx].value.shape().to_vec();
        let need_a = self.nodes[a.0].value.requires_grad();
        let need_b = self.nodes[b.0].value.requires_grad();
        let a_shape = self.nodes[a.0].value.shape().to_vec();
        let b_shape = self.nodes[b.0].value.shape().to_vec();
        let a_data = self.nodes[a.0].value.data().to_vec();
        let b_data = self.nodes[b.0].value.data().to_vec();
        let mut d_a = if need_a { vec![S::zero(); a_data.len()] } else { Vec::new() };
        let mut d_b = if need_b { vec![S::zero(); b_data.len()] } else { Vec::new() };
        if a_shape == b_shape {
            for (i, &g) in d_out.iter().enumerate() {
                if need_a {
                    d_a[i] += fa(g, a_data[i], b_data[i]);
                }
                if need_b {
                    d_b[i] += fb(g, a_data[i], b_data[i]);
                }
            }
        } else {
            let sa = broadcast_strides(&a_shape, &out_shape);
            let sb = broadcast_strides(&b_shape, &out_shape);
            zip_broadcast(&out_shape, &sa, &sb, |flat, ia, ib| {
                let g = d_out[flat];
                if need_a {
                    d_a[ia] += fa(g, a_data[ia], b_data[ib]);
                }
                if need_b {
                    d_b[ib] += fb(g, a_data[ia], b_data[ib]);
                }
            });
        }
        if need_a {
            self.accumulate(a, &d_a);
        }
        if need_b {
            self.accumulate(b, &d_b);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d(&mut self, idx: usize, input: Var, kernel: Var, stride: usize, padding: usize, d_out: &[S]) {
        let si = self.nodes[input.0].value.shape().to_vec();
        let sk = self.nodes[kernel.0].value.shape().to_vec();
        let so = self.nodes[idx].value.shape().to_vec();
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, _, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        let (h_out, w_out) = (so[2], so[3]);
        let need_in = self.nodes[input.0].value.requires_grad();
        let need_k = self.nodes[kernel.0].value.requires_grad();
        let rows = b * h_out * w_out;
        let k_dim = c * kh * kw;
        let d_out_mat = nchw_to_rows(d_out, b, o, h_out * w_out);
        if need_k {
            // dW = dOut_mat [o, rows] x col [rows, k_dim].
            let in_data = self.nodes[input.0].value.data();
            let col_t = im2col_t(in_data, b, c, h, w, kh, kw, stride, padding, h_out, w_out);
            let col = transpose_raw(&col_t, k_dim, rows);
            let d_k = matmul_raw(&d_out_mat, &col, o, rows, k_dim);
            self.accumulate(kernel, &d_k);
        }
        if need_in {
            // dcol = Wᵀ [k_dim, o] x dOut_mat [o, rows], scattered back.
            let k_data = self.nodes[kernel.0].value.data();
            let w_t = transpose_raw(k_data, o, k_dim);
            let d_col_t = matmul_raw(&w_t, &d_out_mat, k_dim, o, rows);
            let mut d_in = vec![S::zero(); b * c * h * w];
            for ci in 0..c {
                for ky in 0..kh {
                    let (oh_lo, oh_hi) = conv_span(h, ky, padding, stride, h_out);
                    for kx in 0..kw {
                        let kidx = (ci * kh + ky) * kw + kx;
                        let (ow_lo, ow_hi) = conv_span(w, kx, padding, stride, w_out);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let len = ow_hi - ow_lo;
                        for bi in 0..b {
                            let iplane = (bi * c + ci) * h * w;
                            for oh in oh_lo..oh_hi {
                                let iy = oh * stride + ky - padding;
                                let i0 = iplane + iy * w + ow_lo * stride + kx - padding;
                                let src_base = kidx * rows + (bi * h_out + oh) * w_out + ow_lo;
                                let src = &d_col_t[src_base..src_base + len];
                                if stride == 1 {
                                    let dst = &mut d_in[i0..i0 + len];
                                    for (d, &g) in dst.iter_mut().zip(src) {
                                        *d += g;
                                    }
                                } else {
                                    let dst = &mut d_in[i0..i0 + (len - 1) * stride + 1];
                                    for (d, &g) in dst.iter_mut().step_by(stride).zip(src) {
                                        *d += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            self.accumulate(input, &d_in);
        }
    }
}

/// Output-coordinate span `[lo, hi)` for which `out*stride + k_off - pad`
/// lands inside `[0, limit)`.
fn conv_span(limit: usize, k_off: usize, pad: usize, stride: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    let hi = if limit + pad > k_off {
        ((limit - 1 + pad - k_off) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Plain row-major matrix product, shared by forward and tests.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = p * n;
            let orow = i * n;
            for j in 0..n {
                out[orow + j] += av * b[brow + j];
            }
        }
    }
    out
}

/// Patch matrix in `[C*kh*kw, B*h_out*w_out]` layout (kernel index major),
/// zero-padded entries included. Wide trailing row lets the matrix
/// products over it vectorize.
#[allow(clippy::too_many_arguments)]
fn im2col_t<S: Scalar>(
    input: &[S],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<S> {
    let rows = b * h_out * w_out;
    let mut col = vec![S::zero(); c * kh * kw * rows];
    for ci in 0..c {
        for ky in 0..kh {
            let (oh_lo, oh_hi) = conv_span(h, ky, padding, stride, h_out);
            for kx in 0..kw {
                let kidx = (ci * kh + ky) * kw + kx;
                let (ow_lo, ow_hi) = conv_span(w, kx, padding, stride, w_out);
                if ow_lo >= ow_hi {
                    continue;
                }
                let len = ow_hi - ow_lo;
                for bi in 0..b {
                    let iplane = (bi * c + ci) * h * w;
                    for oh in oh_lo..oh_hi {
                        let iy = oh * stride + ky - padding;
                        let i0 = iplane + iy * w + ow_lo * stride + kx - padding;
                        let dst_base = kidx * rows + (bi * h_out + oh) * w_out + ow_lo;
                        let dst = &mut col[dst_base..dst_base + len];
                        if stride == 1 {
                            dst.copy_from_slice(&input[i0..i0 + len]);
                        } else {
                            let src = &input[i0..i0 + (len - 1) * stride + 1];
                            for (d, x) in dst.iter_mut().zip(src.iter().step_by(stride)) {
                                *d = *x;
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// `[o, rows]` channel-major activations to `[b, o, h_out, w_out]`.
fn rows_to_nchw<S: Scalar>(mat: &[S], b: usize, o: usize, plane: usize) -> Vec<S> {
    let rows = b * plane;
    let mut out = vec![S::zero(); o * rows];
    for bi in 0..b {
        for oi in 0..o {
            let src = &mat[oi * rows + bi * plane..oi * rows + (bi + 1) * plane];
            out[(bi * o + oi) * plane..(bi * o + oi + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`rows_to_nchw`].
fn nchw_to_rows<S: Scalar>(t: &[S], b: usize, o: usize, plane: usize) -> Vec<S> {
    let rows = b * plane;
    let mut out = vec![S::zero(); o * rows];
    for bi in 0..b {
        for oi in 0..o {
            let src = &t[(bi * o + oi) * plane..(bi * o + oi + 1) * plane];
            out[oi * rows + bi * plane..oi * rows + (bi + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

fn transpose_raw<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_raw<S: Scalar>(
    input: &[S],
    kernel: &[S],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<S> {
    let rows = b * h_out * w_out;
    let k_dim = c * kh * kw;
    let col_t = im2col_t(input, b, c, h, w, kh, kw, stride, padding, h_out, w_out);
    let out_mat = matmul_raw(kernel, &col_t, o, k_dim, rows);
    rows_to_nchw(&out_mat, b, o, h_out * w_out)
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tape<f64>;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = T64::new();
        let i2 = tape.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_annihilating_product() {
        let mut tape = T64::new();
        let a = tape.input(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let b = tape.input(t(&[2, 2], &[0.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_against_triple_loop_oracle() {
        // Independent oracle: the textbook definition, one element at a time.
        let mut rng = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        let a: Vec<f64> = (0..12).map(|_| next()).collect();
        let b: Vec<f64> = (0..8).map(|_| next()).collect();
        let mut expect = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a[i * 4 + p] * b[p * 2 + j];
                }
                expect[i * 2 + j] = acc;
            }
        }
        let mut tape = T64::new();
        let va = tape.input(t(&[3, 4], &a));
        let vb = tape.input(t(&[4, 2], &b));
        let c = tape.matmul(va, vb).unwrap();
        for (got, want) in tape.data(c).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut tape = T64::new();
        let a = tape.input(Tensor::zeros(vec![2, 3]));
        let b = tape.input(Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn logsumexp_constant_input_gives_log_count() {
        let mut tape = T64::new();
        let x = tape.input(t(&[4], &[0.0; 4]));
        let y = tape.logsumexp(x, 0).unwrap();
        assert_eq!(tape.item(y), 4.0f64.ln());
    }

    #[test]
    fn logsumexp_max_shift_no_overflow() {
        let mut tape = T64::new();
        let x = tape.input(t(&[2], &[1000.0, 1000.0]));
        let y = tape.logsumexp(x, 0).unwrap();
        assert!((tape.item(y) - (1000.0 + 2.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_direct_evaluation_oracle() {
        // ln(e^1 + e^2 + e^3), small enough to evaluate without shifting.
        let expect = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln();
        assert!((expect - 3.40760596444438).abs() < 1e-12);
        let mut tape = T64::new();
        let x = tape.input(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.logsumexp(x, 0).unwrap();
        assert!((tape.item(y) - expect).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_bad_axis_is_dimension_error() {
        let mut tape = T64::new();
        let x = tape.input(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.logsumexp(x, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv2d_identity_one_by_one() {
        let mut tape = T64::new();
        let img: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| i as f64 * 0.03 - 0.7).collect();
        let x = tape.input(t(&[2, 3, 4, 4], &img));
        // Kernel [3,3,1,1] = identity across channels.
        let mut k = vec![0.0; 9];
        for ci in 0..3 {
            k[ci * 3 + ci] = 1.0;
        }
        let kv = tape.input(t(&[3, 3, 1, 1], &k));
        let y = tape.conv2d(x, kv, 1, 0).unwrap();
        assert_eq!(tape.data(y), img.as_slice());
    }

    #[test]
    fn conv2d_zero_kernel_gives_zero_output() {
        let mut tape = T64::new();
        let x = tape.input(t(&[1, 2, 5, 5], &vec![0.4; 50]));
        let k = tape.input(Tensor::zeros(vec![3, 2, 3, 3]));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(y), &[1, 3, 5, 5]);
    }

    #[test]
    fn conv2d_matches_sliding_window_oracle() {
        // Oracle: direct sliding-window accumulation, written independently
        // of the production loop order.
        let mut val = 0.37f64;
        let mut next = || {
            val = (val * 997.0 + 0.123).fract() * 2.0 - 1.0;
            val
        };
        let input: Vec<f64> = (0..25).map(|_| next()).collect();
        let kernel: Vec<f64> = (0..9).map(|_| next()).collect();
        for (stride, padding) in [(1usize, 0usize), (1, 1), (2, 1)] {
            let h_out = (5 + 2 * padding - 3) / stride + 1;
            let w_out = h_out;
            let mut expect = vec![0.0f64; h_out * w_out];
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut acc = 0.0;
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let iy = (oh * stride + ky) as isize - padding as isize;
                            let ix = (ow * stride + kx) as isize - padding as isize;
                            if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                                acc += input[iy as usize * 5 + ix as usize] * kernel[ky * 3 + kx];
                            }
                        }
                    }
                    expect[oh * w_out + ow] = acc;
                }
            }
            let mut tape = T64::new();
            let x = tape.input(t(&[1, 1, 5, 5], &input));
            let k = tape.input(t(&[1, 1, 3, 3], &kernel));
            let y = tape.conv2d(x, k, stride, padding).unwrap();
            for (got, want) in tape.data(y).iter().zip(&expect) {
                assert!((got - want).abs() < 1e-12, "stride {stride} pad {padding}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn conv2d_kernel_larger_than_padded_input_errors() {
        let mut tape = T64::new();
        let x = tape.input(Tensor::zeros(vec![1, 1, 2, 2]));
        let k = tape.input(Tensor::zeros(vec![1, 1, 5, 5]));
        assert!(matches!(tape.conv2d(x, k, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_square_at_three() {
        let mut tape = T64::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_constant_loss_zero_grads() {
        let mut tape = T64::new();
        let x = tape.param(Tensor::scalar(3.0));
        let zero = tape.input(Tensor::scalar(0.0));
        let y = tape.mul(x, zero).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = T64::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_over_reuse() {
        // loss = x*x + x  →  d = 2x + 1 = 7 at x = 3.
        let mut tape = T64::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut tape = T64::new();
        let x = tape.input(Tensor::scalar(0.0));
        assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
        let a = tape.input(Tensor::scalar(1.0));
        let b = tape.input(Tensor::scalar(0.0));
        assert!(matches!(tape.div(a, b), Err(Error::NonFinite { op: "div" })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = T64::new();
        let x = tape.input(t(&[2, 3], &[0.1, -2.0, 5.0, 1.0, 1.0, 1.0]));
        let y = tape.softmax(x, 1).unwrap();
        let d = tape.data(y);
        for r in 0..2 {
            let s: f64 = d[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(d[r * 3..r * 3 + 3].iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        assert!((d[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn broadcast_add_and_reduce() {
        let mut tape = T64::new();
        let a = tape.param(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.param(t(&[1, 3], &[10.0, 20.0, 30.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        let s = tape.sum_all(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 3.0]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn avgpool_global_is_mean() {
        let mut tape = T64::new();
        let x = tape.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.avgpool2d(x, (2, 2), 1).unwrap();
        assert_eq!(tape.item(y), 2.5);
    }

    #[test]
    fn slice_rows_and_backward() {
        let mut tape = T64::new();
        let x = tape.param(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = tape.slice_rows(x, 1, 3).unwrap();
        assert_eq!(tape.data(s), &[3.0, 4.0, 5.0, 6.0]);
        let l = tape.sum_all(s).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn spatial_to_rows_layout() {
        let mut tape = T64::new();
        // [1,2,1,2]: channels hold [1,2] and [10,20].
        let x = tape.input(t(&[1, 2, 1, 2], &[1.0, 2.0, 10.0, 20.0]));
        let r = tape.spatial_to_rows(x).unwrap();
        assert_eq!(tape.shape(r), &[2, 2]);
        // Row (y=0,x=0) = [1,10]; row (y=0,x=1) = [2,20].
        assert_eq!(tape.data(r), &[1.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn f32_tape_smoke() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.5f32, -0.5]).unwrap());
        let y = tape.mul(x, x).unwrap();
        let l = tape.sum_all(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0f32, -1.0]);
    }

    #[test]
    fn determinism_same_inputs_bitwise() {
        let run = || {
            let mut tape = T64::new();
            let x = tape.input(t(&[1, 2, 2, 1], &[0.3, -1.2, 0.7, 2.2]));
            let k = tape.input(t(&[1, 2, 1, 1], &[0.5, -0.25]));
            let c = tape.conv2d(x, k, 1, 0).unwrap();
            let s = tape.sigmoid(c).unwrap();
            tape.data(s).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
