//! Wengert tape: forward values are recorded as nodes in topological order,
//! then gradients are propagated once, in reverse, by `backward`.
//!
//! Tensors on the tape are immutable; `backward` writes only to a separate
//! gradient arena. A fresh tape is built per training sample, so read-only
//! parameter sharing across worker threads is safe.

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::{broadcast_shape, broadcast_strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Relu { a: usize },
    Softmax { a: usize, axis: usize },
    Sum { a: usize },
    Reshape { a: usize },
    Transpose { a: usize },
    BroadcastTo { a: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatChannels { parts: Vec<usize> },
    SliceChannels { a: usize, from: usize, to: usize },
    Conv2d { x: usize, kernel: usize, bias: usize, k: usize, stride: usize, col: Option<Vec<f64>> },
    BilinearResize { a: usize },
    Embed { table: usize, ids: Vec<usize> },
    BceWithLogits { logits: usize, targets: Vec<f64> },
    CrossEntropyRows { logits: usize, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient arena produced by [`Tape::backward`], indexed by [`TensorRef`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for a node, if it participated in the backward pass.
    pub fn get(&self, r: TensorRef) -> Option<&[f64]> {
        self.grads.get(r.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a leaf, defaulting to zeros when the loss never reached it.
    pub fn get_or_zeros(&self, r: TensorRef, numel: usize) -> Vec<f64> {
        match self.get(r) {
            Some(g) => g.to_vec(),
            None => vec![0.0; numel],
        }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Tape that records backward rules (training mode).
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256), grad_enabled: true }
    }

    /// Forward-only tape: leaves are treated as constants and backward
    /// caches are dropped.
    pub fn no_grad() -> Self {
        Tape { nodes: Vec::with_capacity(256), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> TensorRef {
        let requires = self.grad_enabled;
        self.push_unchecked(value, Op::Leaf, requires)
    }

    /// Non-differentiable leaf (an input or fixed tensor).
    pub fn constant(&mut self, value: Tensor) -> TensorRef {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, r: TensorRef) -> &Tensor {
        &self.nodes[r.0].value
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        &self.nodes[r.0].value.shape
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorRef {
        self.nodes.push(Node { value, op, requires_grad });
        TensorRef(self.nodes.len() - 1)
    }

    /// Record a computed node. In debug builds every forward result is
    /// checked for NaN/Inf so numeric blowups surface at the op that
    /// produced them.
    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<TensorRef> {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let _ = op_name;
        let requires_grad = self.grad_enabled && self.op_parents(&op).iter().any(|&p| self.nodes[p].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn op_parents(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::Sigmoid { a }
            | Op::Tanh { a }
            | Op::Relu { a }
            | Op::Softmax { a, .. }
            | Op::Sum { a }
            | Op::Reshape { a }
            | Op::Transpose { a }
            | Op::BroadcastTo { a }
            | Op::SliceChannels { a, .. }
            | Op::BilinearResize { a } => vec![*a],
            Op::ConcatRows { parts } | Op::ConcatChannels { parts } => parts.clone(),
            Op::Conv2d { x, kernel, bias, .. } => vec![*x, *kernel, *bias],
            Op::Embed { table, .. } => vec![*table],
            Op::BceWithLogits { logits, .. } | Op::CrossEntropyRows { logits, .. } => vec![*logits],
        }
    }

    // ── Elementwise and broadcast ops ───────────────────────────────────

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let value = self.binary_broadcast(a, b, "add", |x, y| x + y)?;
        self.push(value, Op::Add { a: a.0, b: b.0 }, "add")
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let value = self.binary_broadcast(a, b, "mul", |x, y| x * y)?;
        self.push(value, Op::Mul { a: a.0, b: b.0 }, "mul")
    }

    pub fn scale(&mut self, a: TensorRef, factor: f64) -> Result<TensorRef> {
        let src = &self.nodes[a.0].value;
        let value = Tensor::new(src.shape.clone(), src.data.iter().map(|&v| v * factor).collect());
        self.push(value, Op::Scale { a: a.0, factor }, "scale")
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> Result<TensorRef> {
        let src = &self.nodes[a.0].value;
        let value = Tensor::new(
            src.shape.clone(),
            src.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
        );
        self.push(value, Op::Sigmoid { a: a.0 }, "sigmoid")
    }

    pub fn tanh(&mut self, a: TensorRef) -> Result<TensorRef> {
        let src = &self.nodes[a.0].value;
        let value = Tensor::new(src.shape.clone(), src.data.iter().map(|&v| v.tanh()).collect());
        self.push(value, Op::Tanh { a: a.0 }, "tanh")
    }

    pub fn relu(&mut self, a: TensorRef) -> Result<TensorRef> {
        let src = &self.nodes[a.0].value;
        let value = Tensor::new(src.shape.clone(), src.data.iter().map(|&v| v.max(0.0)).collect());
        self.push(value, Op::Relu { a: a.0 }, "relu")
    }

    fn binary_broadcast(
        &self,
        a: TensorRef,
        b: TensorRef,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let shape = broadcast_shape(&ta.shape, &tb.shape).ok_or_else(|| TensorError::ShapeMismatch {
            op,
            lhs: ta.shape.clone(),
            rhs: tb.shape.clone(),
        })?;
        if ta.shape == tb.shape {
            let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::new(shape, data));
        }
        let ndim = shape.len();
        let sa = broadcast_strides(&ta.shape, ndim);
        let sb = broadcast_strides(&tb.shape, ndim);
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        let mut coords = vec![0usize; ndim];
        let (mut ia, mut ib) = (0usize, 0usize);
        for out in data.iter_mut() {
            *out = f(ta.data[ia], tb.data[ib]);
            for d in (0..ndim).rev() {
                coords[d] += 1;
                ia += sa[d];
                ib += sb[d];
                if coords[d] < shape[d] {
                    break;
                }
                coords[d] = 0;
                ia -= sa[d] * shape[d];
                ib -= sb[d] * shape[d];
            }
        }
        Ok(Tensor::new(shape, data))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(&ta.data, &tb.data, &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out), Op::Matmul { a: a.0, b: b.0 }, "matmul")
    }

    pub fn transpose(&mut self, a: TensorRef) -> Result<TensorRef> {
        let ta = &self.nodes[a.0].value;
        if ta.shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose",
                expected: "rank-2 tensor".into(),
                got: ta.shape.clone(),
            });
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out), Op::Transpose { a: a.0 }, "transpose")
    }

    pub fn reshape(&mut self, a: TensorRef, shape: &[usize]) -> Result<TensorRef> {
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        self.push(value, Op::Reshape { a: a.0 }, "reshape")
    }

    pub fn broadcast_to(&mut self, a: TensorRef, shape: &[usize]) -> Result<TensorRef> {
        let ta = &self.nodes[a.0].value;
        let ok = broadcast_shape(&ta.shape, shape).map(|s| s == shape).unwrap_or(false);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: ta.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let ndim = shape.len();
        let strides = broadcast_strides(&ta.shape, ndim);
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        let mut coords = vec![0usize; ndim];
        let mut ia = 0usize;
        for out in data.iter_mut() {
            *out = ta.data[ia];
            for d in (0..ndim).rev() {
                coords[d] += 1;
                ia += strides[d];
                if coords[d] < shape[d] {
                    break;
                }
                coords[d] = 0;
                ia -= strides[d] * shape[d];
            }
        }
        self.push(Tensor::new(shape.to_vec(), data), Op::BroadcastTo { a: a.0 }, "broadcast_to")
    }

    pub fn sum(&mut self, a: TensorRef) -> Result<TensorRef> {
        let total: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { a: a.0 }, "sum")
    }

    pub fn mean(&mut self, a: TensorRef) -> Result<TensorRef> {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ── Softmax ─────────────────────────────────────────────────────────

    /// Max-subtracted softmax normalizing slices along `axis`.
    pub fn softmax(&mut self, a: TensorRef, axis: usize) -> Result<TensorRef> {
        let ta = &self.nodes[a.0].value;
        if axis >= ta.shape.len() {
            return Err(TensorError::InvalidAxis { op: "softmax", axis, shape: ta.shape.clone() });
        }
        let n = ta.shape[axis];
        let moved = kernels::move_axis_last(&ta.data, &ta.shape, axis);
        let mut out = vec![0.0; moved.len()];
        kernels::softmax_rows(&moved, &mut out, n);
        let back = kernels::move_last_to_axis(&out, &ta.shape, axis);
        self.push(Tensor::new(ta.shape.clone(), back), Op::Softmax { a: a.0, axis }, "softmax")
    }

    // ── Structural ops ──────────────────────────────────────────────────

    /// Stack along axis 0; all parts must share trailing dimensions.
    pub fn concat_rows(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let first = &self.nodes[parts[0].0].value;
        let tail = first.shape[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape.is_empty() || t.shape[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            rows += t.shape[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let op = Op::ConcatRows { parts: parts.iter().map(|r| r.0).collect() };
        self.push(Tensor::new(shape, data), op, "concat_rows")
    }

    /// Concatenate along the last axis; all parts must share leading dims.
    pub fn concat_channels(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        assert!(!parts.is_empty(), "concat_channels: empty input");
        let first_shape = self.nodes[parts[0].0].value.shape.clone();
        let lead = &first_shape[..first_shape.len() - 1];
        let mut channels = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape.len() != first_shape.len() || &t.shape[..t.shape.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: first_shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            channels += *t.shape.last().unwrap();
        }
        let positions: usize = lead.iter().product();
        let mut shape = lead.to_vec();
        shape.push(channels);
        let mut data = vec![0.0; positions * channels];
        let mut offset = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let c = *t.shape.last().unwrap();
            for pos in 0..positions {
                data[pos * channels + offset..pos * channels + offset + c]
                    .copy_from_slice(&t.data[pos * c..(pos + 1) * c]);
            }
            offset += c;
        }
        let op = Op::ConcatChannels { parts: parts.iter().map(|r| r.0).collect() };
        self.push(Tensor::new(shape, data), op, "concat_channels")
    }

    /// Slice `[from, to)` of the last axis.
    pub fn slice_channels(&mut self, a: TensorRef, from: usize, to: usize) -> Result<TensorRef> {
        let ta = &self.nodes[a.0].value;
        let c = *ta.shape.last().expect("slice_channels: rank >= 1");
        if from >= to || to > c {
            return Err(TensorError::InvalidAxis { op: "slice_channels", axis: to, shape: ta.shape.clone() });
        }
        let positions: usize = ta.shape[..ta.shape.len() - 1].iter().product();
        let width = to - from;
        let mut data = vec![0.0; positions * width];
        for pos in 0..positions {
            data[pos * width..(pos + 1) * width]
                .copy_from_slice(&ta.data[pos * c + from..pos * c + to]);
        }
        let mut shape = ta.shape.clone();
        *shape.last_mut().unwrap() = width;
        self.push(Tensor::new(shape, data), Op::SliceChannels { a: a.0, from, to }, "slice_channels")
    }

    // ── Convolution and resampling ──────────────────────────────────────

    /// Same-padded cross-correlation over an H×W×Cin map with an odd k×k
    /// kernel of shape [k, k, Cin, Cout] plus a Cout bias, stride 1.
    pub fn conv2d(&mut self, x: TensorRef, kernel: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        self.conv2d_stride(x, kernel, bias, 1)
    }

    /// Strided variant used by the downsampling backbone blocks.
    pub fn conv2d_stride(
        &mut self,
        x: TensorRef,
        kernel: TensorRef,
        bias: TensorRef,
        stride: usize,
    ) -> Result<TensorRef> {
        let tx = &self.nodes[x.0].value;
        let tk = &self.nodes[kernel.0].value;
        let tb = &self.nodes[bias.0].value;
        if tx.shape.len() != 3 || tk.shape.len() != 4 {
            return Err(TensorError::BadShape {
                op: "conv2d",
                expected: "x: [H,W,Cin], kernel: [k,k,Cin,Cout]".into(),
                got: tx.shape.clone(),
            });
        }
        let (h, w, cin) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (k, cout) = (tk.shape[0], tk.shape[3]);
        if tk.shape[1] != k || k % 2 == 0 {
            return Err(TensorError::BadShape {
                op: "conv2d",
                expected: "square odd kernel".into(),
                got: tk.shape.clone(),
            });
        }
        if tk.shape[2] != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape.clone(),
                rhs: tk.shape.clone(),
            });
        }
        if tb.shape != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: tk.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let mut col = vec![0.0; ((h + 2 * ((k - 1) / 2) - k) / stride + 1) * ((w + 2 * ((k - 1) / 2) - k) / stride + 1) * k * k * cin];
        let (oh, ow) = kernels::im2col(&tx.data, h, w, cin, k, stride, &mut col);
        let mut out = vec![0.0; oh * ow * cout];
        kernels::matmul_acc(&col, &tk.data, &mut out, oh * ow, k * k * cin, cout);
        for pos in 0..oh * ow {
            for ch in 0..cout {
                out[pos * cout + ch] += tb.data[ch];
            }
        }
        let cache = if self.grad_enabled { Some(col) } else { None };
        let op = Op::Conv2d { x: x.0, kernel: kernel.0, bias: bias.0, k, stride, col: cache };
        self.push(Tensor::new(vec![oh, ow, cout], out), op, "conv2d")
    }

    /// Bilinear resize of an H×W×C map (half-pixel convention).
    pub fn bilinear_resize(&mut self, a: TensorRef, oh: usize, ow: usize) -> Result<TensorRef> {
        let ta = &self.nodes[a.0].value;
        if ta.shape.len() != 3 {
            return Err(TensorError::BadShape {
                op: "bilinear_resize",
                expected: "[H,W,C]".into(),
                got: ta.shape.clone(),
            });
        }
        let (h, w, c) = (ta.shape[0], ta.shape[1], ta.shape[2]);
        let mut out = vec![0.0; oh * ow * c];
        kernels::bilinear_resize(&ta.data, h, w, c, oh, ow, &mut out);
        self.push(Tensor::new(vec![oh, ow, c], out), Op::BilinearResize { a: a.0 }, "bilinear_resize")
    }

    /// Row gather from an embedding table [V, C].
    pub fn embed(&mut self, table: TensorRef, ids: &[usize]) -> Result<TensorRef> {
        let tt = &self.nodes[table.0].value;
        if tt.shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "embed",
                expected: "[V,C] table".into(),
                got: tt.shape.clone(),
            });
        }
        let (v, c) = (tt.shape[0], tt.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { op: "embed", index: id, len: v });
            }
            data.extend_from_slice(&tt.data[id * c..(id + 1) * c]);
        }
        let op = Op::Embed { table: table.0, ids: ids.to_vec() };
        self.push(Tensor::new(vec![ids.len(), c], data), op, "embed")
    }

    // ── Losses ──────────────────────────────────────────────────────────

    /// Mean binary cross-entropy against 0/1 targets, computed in the
    /// stable logit form max(z,0) − z·y + ln(1 + e^{−|z|}).
    pub fn bce_with_logits(&mut self, logits: TensorRef, targets: &Tensor) -> Result<TensorRef> {
        let tl = &self.nodes[logits.0].value;
        if tl.shape != targets.shape {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: tl.shape.clone(),
                rhs: targets.shape.clone(),
            });
        }
        if targets.data.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(TensorError::BadShape {
                op: "bce_with_logits",
                expected: "binary targets (0/1)".into(),
                got: targets.shape.clone(),
            });
        }
        let n = tl.numel() as f64;
        let mut total = 0.0;
        for (&z, &y) in tl.data.iter().zip(&targets.data) {
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let op = Op::BceWithLogits { logits: logits.0, targets: targets.data.clone() };
        self.push(Tensor::scalar(total / n), op, "bce_with_logits")
    }

    /// Mean cross-entropy of row-wise logits against class labels.
    pub fn cross_entropy_rows(&mut self, logits: TensorRef, labels: &[usize]) -> Result<TensorRef> {
        let tl = &self.nodes[logits.0].value;
        if tl.shape.len() != 2 || tl.shape[0] != labels.len() {
            return Err(TensorError::BadShape {
                op: "cross_entropy_rows",
                expected: format!("[{}, classes] logits", labels.len()),
                got: tl.shape.clone(),
            });
        }
        let classes = tl.shape[1];
        let mut total = 0.0;
        for (row, &label) in tl.data.chunks_exact(classes).zip(labels) {
            if label >= classes {
                return Err(TensorError::IndexOutOfRange { op: "cross_entropy_rows", index: label, len: classes });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            total += logsum - row[label];
        }
        let op = Op::CrossEntropyRows { logits: logits.0, labels: labels.to_vec() };
        self.push(Tensor::scalar(total / labels.len() as f64), op, "cross_entropy_rows")
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Visits every node at most once, in
    /// reverse topological order, and returns per-node gradient buffers.
    pub fn backward(&self, loss: TensorRef) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(TensorError::NonScalarLoss { shape: loss_node.value.shape.clone() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate_parents(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], idx: usize) -> &'g mut [f64] {
        let numel = self.nodes[idx].value.numel();
        grads[idx].get_or_insert_with(|| vec![0.0; numel])
    }

    fn accumulate_parents(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.needs(*a) {
                    let da = self.grad_buf(grads, *a);
                    kernels::matmul_a_bt_acc(g, &tb.data, da, m, k, n);
                }
                if self.needs(*b) {
                    let db = self.grad_buf(grads, *b);
                    kernels::matmul_at_b_acc(&ta.data, g, db, m, k, n);
                }
            }
            Op::Add { a, b } => {
                self.reduce_into(grads, *a, g, &node.value.shape, None);
                self.reduce_into(grads, *b, g, &node.value.shape, None);
            }
            Op::Mul { a, b } => {
                // d a = g ⊙ b, d b = g ⊙ a, each reduced over broadcast dims.
                self.reduce_into(grads, *a, g, &node.value.shape, Some(&self.nodes[*b].value));
                self.reduce_into(grads, *b, g, &node.value.shape, Some(&self.nodes[*a].value));
            }
            Op::Scale { a, factor } => {
                if self.needs(*a) {
                    let da = self.grad_buf(grads, *a);
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv * factor;
                    }
                }
            }
            Op::Sigmoid { a } => {
                if self.needs(*a) {
                    let y = &node.value.data;
                    let da = self.grad_buf(grads, *a);
                    for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Tanh { a } => {
                if self.needs(*a) {
                    let y = &node.value.data;
                    let da = self.grad_buf(grads, *a);
                    for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(y) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Relu { a } => {
                if self.needs(*a) {
                    let x = &self.nodes[*a].value.data;
                    let da = self.grad_buf(grads, *a);
                    for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax { a, axis } => {
                if self.needs(*a) {
                    let shape = &node.value.shape;
                    let n = shape[*axis];
                    let y_moved = kernels::move_axis_last(&node.value.data, shape, *axis);
                    let g_moved = kernels::move_axis_last(g, shape, *axis);
                    let mut dx_moved = vec![0.0; g.len()];
                    kernels::softmax_rows_backward(&y_moved, &g_moved, &mut dx_moved, n);
                    let dx = kernels::move_last_to_axis(&dx_moved, shape, *axis);
                    let da = self.grad_buf(grads, *a);
                    for (d, &v) in da.iter_mut().zip(&dx) {
                        *d += v;
                    }
                }
            }
            Op::Sum { a } => {
                if self.needs(*a) {
                    let gv = g[0];
                    let da = self.grad_buf(grads, *a);
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Reshape { a } => {
                if self.needs(*a) {
                    let da = self.grad_buf(grads, *a);
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Transpose { a } => {
                if self.needs(*a) {
                    let (n, m) = (node.value.shape[0], node.value.shape[1]);
                    let da = self.grad_buf(grads, *a);
                    for i in 0..n {
                        for j in 0..m {
                            da[j * n + i] += g[i * m + j];
                        }
                    }
                }
            }
            Op::BroadcastTo { a } => {
                self.reduce_into(grads, *a, g, &node.value.shape, None);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let numel = self.nodes[p].value.numel();
                    if self.needs(p) {
                        let dp = self.grad_buf(grads, p);
                        for (d, &gv) in dp.iter_mut().zip(&g[offset..offset + numel]) {
                            *d += gv;
                        }
                    }
                    offset += numel;
                }
            }
            Op::ConcatChannels { parts } => {
                let channels = *node.value.shape.last().unwrap();
                let positions: usize = node.value.shape[..node.value.shape.len() - 1].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let c = *self.nodes[p].value.shape.last().unwrap();
                    if self.needs(p) {
                        let dp = self.grad_buf(grads, p);
                        for pos in 0..positions {
                            for ch in 0..c {
                                dp[pos * c + ch] += g[pos * channels + offset + ch];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceChannels { a, from, to } => {
                if self.needs(*a) {
                    let c = *self.nodes[*a].value.shape.last().unwrap();
                    let width = to - from;
                    let positions: usize = node.value.shape[..node.value.shape.len() - 1].iter().product();
                    let da = self.grad_buf(grads, *a);
                    for pos in 0..positions {
                        for ch in 0..width {
                            da[pos * c + from + ch] += g[pos * width + ch];
                        }
                    }
                }
            }
            Op::Conv2d { x, kernel, bias, k, stride, col } => {
                let tx = &self.nodes[*x].value;
                let tk = &self.nodes[*kernel].value;
                let (h, w, cin) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                let cout = tk.shape[3];
                let positions = node.value.numel() / cout;
                let kkc = k * k * cin;
                let col_owned;
                let col: &[f64] = match col {
                    Some(c) => c,
                    None => {
                        let mut c = vec![0.0; positions * kkc];
                        kernels::im2col(&tx.data, h, w, cin, *k, *stride, &mut c);
                        col_owned = c;
                        &col_owned
                    }
                };
                if self.needs(*kernel) {
                    let dk = self.grad_buf(grads, *kernel);
                    kernels::matmul_at_b_acc(col, g, dk, positions, kkc, cout);
                }
                if self.needs(*bias) {
                    let db = self.grad_buf(grads, *bias);
                    for pos in 0..positions {
                        for ch in 0..cout {
                            db[ch] += g[pos * cout + ch];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dcol = vec![0.0; positions * kkc];
                    kernels::matmul_a_bt_acc(g, &tk.data, &mut dcol, positions, kkc, cout);
                    let dx = self.grad_buf(grads, *x);
                    kernels::col2im_acc(&dcol, h, w, cin, *k, *stride, dx);
                }
            }
            Op::BilinearResize { a } => {
                if self.needs(*a) {
                    let src = &self.nodes[*a].value.shape;
                    let (h, w, c) = (src[0], src[1], src[2]);
                    let (oh, ow) = (node.value.shape[0], node.value.shape[1]);
                    let da = self.grad_buf(grads, *a);
                    kernels::bilinear_resize_backward(g, h, w, c, oh, ow, da);
                }
            }
            Op::Embed { table, ids } => {
                if self.needs(*table) {
                    let c = self.nodes[*table].value.shape[1];
                    let dt = self.grad_buf(grads, *table);
                    for (row, &id) in ids.iter().enumerate() {
                        for ch in 0..c {
                            dt[id * c + ch] += g[row * c + ch];
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if self.needs(*logits) {
                    let z = &self.nodes[*logits].value.data;
                    let scale = g[0] / z.len() as f64;
                    let dl = self.grad_buf(grads, *logits);
                    for ((d, &zv), &yv) in dl.iter_mut().zip(z).zip(targets) {
                        let p = 1.0 / (1.0 + (-zv).exp());
                        *d += scale * (p - yv);
                    }
                }
            }
            Op::CrossEntropyRows { logits, labels } => {
                if self.needs(*logits) {
                    let tl = &self.nodes[*logits].value;
                    let classes = tl.shape[1];
                    let scale = g[0] / labels.len() as f64;
                    let mut probs = vec![0.0; tl.numel()];
                    kernels::softmax_rows(&tl.data, &mut probs, classes);
                    let dl = self.grad_buf(grads, *logits);
                    for (row, &label) in labels.iter().enumerate() {
                        for ch in 0..classes {
                            let onehot = if ch == label { 1.0 } else { 0.0 };
                            dl[row * classes + ch] += scale * (probs[row * classes + ch] - onehot);
                        }
                    }
                }
            }
        }
    }

    /// Accumulate `g` (shaped like `out_shape`) into the gradient of node
    /// `target`, summing over broadcast dimensions, optionally multiplying
    /// by the broadcast co-factor (for Mul).
    fn reduce_into(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: usize,
        g: &[f64],
        out_shape: &[usize],
        cofactor: Option<&Tensor>,
    ) {
        if !self.needs(target) {
            return;
        }
        let tshape = self.nodes[target].value.shape.clone();
        let ndim = out_shape.len();
        let st = broadcast_strides(&tshape, ndim);
        let sc = cofactor.map(|c| broadcast_strides(&c.shape, ndim));
        let dt = self.grad_buf(grads, target);
        let mut coords = vec![0usize; ndim];
        let (mut it, mut ic) = (0usize, 0usize);
        for (flat, &gv) in g.iter().enumerate() {
            let _ = flat;
            match (cofactor, &sc) {
                (Some(c), Some(strides)) => {
                    let _ = strides;
                    dt[it] += gv * c.data[ic];
                }
                _ => dt[it] += gv,
            }
            for d in (0..ndim).rev() {
                coords[d] += 1;
                it += st[d];
                if let Some(strides) = &sc {
                    ic += strides[d];
                }
                if coords[d] < out_shape[d] {
                    break;
                }
                coords[d] = 0;
                it -= st[d] * out_shape[d];
                if let Some(strides) = &sc {
                    ic -= strides[d] * out_shape[d];
                }
            }
        }
    }
}
