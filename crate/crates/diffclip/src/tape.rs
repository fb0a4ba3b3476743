//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation records its output tensor plus enough metadata to replay
//! the chain rule backwards. Nodes are appended in execution order, so the
//! tape is topologically sorted by construction: an operation's inputs always
//! precede it. `backward` walks the list once in reverse and may only run a
//! single time per recording.
//!
//! The tape is confined to one thread. Tensors going in and coming out are
//! plain values and can cross threads freely.

use crate::error::{Error, Result};
use crate::tensor::{axis_geometry, matmul_nn, transpose_raw, Tensor};

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule metadata for one recorded operation.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    MulScalar { x: usize, s: usize },
    Exp { x: usize },
    Gelu { x: usize },
    Sum { x: usize },
    Mean { x: usize, axis: usize },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    RmsNormRows { x: usize, eps: f64 },
    L2Normalize { x: usize, axis: usize },
    Concat { parts: Vec<usize>, axis: usize },
    SliceAxis { x: usize, axis: usize, start: usize, len: usize },
    GatherRows { table: usize, indices: Vec<usize> },
    CrossEntropyRows { logits: usize, targets: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when a gradient path from some requires_grad leaf reaches this node.
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    nan_check: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            nan_check: false,
        }
    }

    /// Tape that validates every op output for NaN/Inf and fails fast.
    pub fn with_nan_check() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            nan_check: true,
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

    /// Gradient of a leaf after `backward`; `None` for non-leaves or leaves
    /// without `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Register a leaf tensor. Its `requires_grad` flag decides whether
    /// `backward` will produce a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Leaf that never tracks gradients (inputs, masks, constants).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, needs_grad: bool, what: &str) -> Result<Var> {
        if self.nan_check {
            value.validate_finite(what)?;
        }
        Ok(self.push(value, op, needs_grad))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ─── forward ops ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_nn(ta.data(), tb.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.record(
            Tensor::matrix(m, n, out)?,
            Op::Matmul { a: a.0, b: b.0 },
            needs,
            "matmul",
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::dim("transpose", t.shape(), &[]));
        }
        let (r, c) = (t.rows(), t.cols());
        let out = transpose_raw(t.data(), r, c);
        let needs = self.needs(x);
        self.record(Tensor::matrix(c, r, out)?, Op::Transpose { x: x.0 }, needs, "transpose")
    }

    fn elementwise_pair(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.record(Tensor::new(&shape, out)?, Op::Add { a: a.0, b: b.0 }, needs, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("sub", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.record(Tensor::new(&shape, out)?, Op::Sub { a: a.0, b: b.0 }, needs, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.record(Tensor::new(&shape, out)?, Op::Mul { a: a.0, b: b.0 }, needs, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.record(Tensor::new(&shape, out)?, Op::Scale { x: x.0, c }, needs, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v + c).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.record(Tensor::new(&shape, out)?, Op::AddScalar { x: x.0 }, needs, "add_scalar")
    }

    /// Multiply every element of `x` by the scalar node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::dim("mul_scalar", self.value(x).shape(), self.value(s).shape()));
        }
        let sv = self.value(s).data()[0];
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * sv).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x) || self.needs(s);
        self.record(
            Tensor::new(&shape, out)?,
            Op::MulScalar { x: x.0, s: s.0 },
            needs,
            "mul_scalar",
        )
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.exp()).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.record(Tensor::new(&shape, out)?, Op::Exp { x: x.0 }, needs, "exp")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.record(Tensor::new(&shape, out)?, Op::Gelu { x: x.0 }, needs, "gelu")
    }

    /// Full reduction to a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.record(Tensor::scalar(s), Op::Sum { x: x.0 }, needs, "sum")
    }

    /// Mean along `axis`; the axis is dropped from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_geometry(t.shape(), axis)?;
        let mut out = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += t.data()[base + i];
                }
            }
        }
        let inv = 1.0 / len as f64;
        for v in out.iter_mut() {
            *v *= inv;
        }
        let mut shape: Vec<usize> = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let needs = self.needs(x);
        self.record(Tensor::new(&shape, out)?, Op::Mean { x: x.0, axis }, needs, "mean")
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_geometry(t.shape(), axis)?;
        let mut out = vec![0.0f64; t.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(t.data()[idx(j)]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = (t.data()[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                let inv = 1.0 / z;
                for j in 0..len {
                    out[idx(j)] *= inv;
                }
            }
        }
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.record(Tensor::new(&shape, out)?, Op::Softmax { x: x.0, axis }, needs, "softmax")
    }

    /// Last-axis layer normalization with affine gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let t = self.value(x);
        let last = *t.shape().last().expect("layer_norm on empty shape");
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [last] || tb.shape() != [last] {
            return Err(Error::dim("layer_norm", t.shape(), tg.shape()));
        }
        let rows = t.numel() / last;
        let mut out = vec![0.0f64; t.numel()];
        for r in 0..rows {
            let xr = &t.data()[r * last..(r + 1) * last];
            let mean = xr.iter().sum::<f64>() / last as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / last as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..last {
                out[r * last + j] = (xr[j] - mean) * inv * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = t.shape().to_vec();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.record(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
            needs,
            "layer_norm",
        )
    }

    /// Affine-free RMS normalization of each row (last axis).
    pub fn rms_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("rms_norm eps must be positive, got {eps}")));
        }
        let t = self.value(x);
        let last = *t.shape().last().expect("rms_norm on empty shape");
        let rows = t.numel() / last;
        let mut out = vec![0.0f64; t.numel()];
        for r in 0..rows {
            let xr = &t.data()[r * last..(r + 1) * last];
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / last as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for j in 0..last {
                out[r * last + j] = xr[j] * inv;
            }
        }
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.record(
            Tensor::new(&shape, out)?,
            Op::RmsNormRows { x: x.0, eps },
            needs,
            "rms_norm_rows",
        )
    }

    /// Normalize slices along `axis` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_geometry(t.shape(), axis)?;
        let mut out = vec![0.0f64; t.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let norm = (0..len).map(|j| t.data()[idx(j)] * t.data()[idx(j)]).sum::<f64>().sqrt();
                if norm < 1e-300 {
                    return Err(Error::Numeric(
                        "l2_normalize: slice with zero norm".to_string(),
                    ));
                }
                let inv = 1.0 / norm;
                for j in 0..len {
                    out[idx(j)] = t.data()[idx(j)] * inv;
                }
            }
        }
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.record(
            Tensor::new(&shape, out)?,
            Op::L2Normalize { x: x.0, axis },
            needs,
            "l2_normalize",
        )
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero parts".to_string()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Axis { axis, shape: first });
        }
        let mut total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_geometry(&shape, axis)?;
        let mut out = vec![0.0f64; shape.iter().product()];
        for o in 0..outer {
            let mut dst = o * total * inner;
            for &p in parts {
                let t = self.value(p);
                let len_p = t.shape()[axis];
                let src = o * len_p * inner;
                out[dst..dst + len_p * inner].copy_from_slice(&t.data()[src..src + len_p * inner]);
                dst += len_p * inner;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.record(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            needs,
            "concat",
        )
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, full, inner) = axis_geometry(t.shape(), axis)?;
        if start + len > full || len == 0 {
            return Err(Error::Config(format!(
                "slice [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let mut out = vec![0.0f64; shape.iter().product()];
        for o in 0..outer {
            let src = (o * full + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&t.data()[src..src + len * inner]);
        }
        let needs = self.needs(x);
        self.record(
            Tensor::new(&shape, out)?,
            Op::SliceAxis {
                x: x.0,
                axis,
                start,
                len,
            },
            needs,
            "slice_axis",
        )
    }

    /// Split into `parts` equal pieces along `axis`.
    pub fn split(&mut self, x: Var, axis: usize, parts: usize) -> Result<Vec<Var>> {
        let t = self.value(x);
        let full = *t
            .shape()
            .get(axis)
            .ok_or(Error::Axis {
                axis,
                shape: t.shape().to_vec(),
            })?;
        if parts == 0 || full % parts != 0 {
            return Err(Error::Config(format!(
                "cannot split extent {full} into {parts} equal parts"
            )));
        }
        let len = full / parts;
        (0..parts)
            .map(|p| self.slice_axis(x, axis, p * len, len))
            .collect()
    }

    /// Select rows of a rank-2 table; indices may repeat.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::dim("gather_rows", t.shape(), &[indices.len()]));
        }
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Config(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(table);
        self.record(
            Tensor::matrix(indices.len(), cols, out)?,
            Op::GatherRows {
                table: table.0,
                indices: indices.to_vec(),
            },
            needs,
            "gather_rows",
        )
    }

    /// Mean over rows of `-log softmax(logits)[r, targets[r]]`, computed via
    /// log-sum-exp without materializing probabilities.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.rows() != targets.len() {
            return Err(Error::dim("cross_entropy_rows", t.shape(), &[targets.len()]));
        }
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(&bad) = targets.iter().find(|&&c| c >= cols) {
            return Err(Error::Config(format!(
                "cross_entropy target {bad} out of range for {cols} columns"
            )));
        }
        let mut total = 0.0f64;
        for r in 0..rows {
            let xr = &t.data()[r * cols..(r + 1) * cols];
            let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + xr.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - xr[targets[r]];
        }
        let needs = self.needs(logits);
        self.record(
            Tensor::scalar(total / rows as f64),
            Op::CrossEntropyRows {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            needs,
            "cross_entropy_rows",
        )
    }

    // ─── backward ──────────────────────────────────────────────────────

    /// Run the chain rule from a scalar loss back to every `requires_grad`
    /// leaf. Gradients accumulate additively across fan-out. Errors if the
    /// loss is not scalar, is not connected to any tracked leaf, or if the
    /// tape has already been consumed by a previous backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; re-record the forward pass first".to_string(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "loss node {} is not on this tape",
                loss.0
            )));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::Tape(
                "loss is detached: no gradient-tracked leaf feeds it".to_string(),
            ));
        }
        self.consumed = true;

        let mut arena: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        arena[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = arena[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    if node.value.requires_grad() {
                        leaf_grads.push((id, g));
                    }
                }
                Op::Matmul { a, b } => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if self.nodes[*a].needs_grad {
                        let bt = transpose_raw(tb.data(), k, n);
                        let da = matmul_nn(&g, &bt, m, n, k);
                        accumulate(&mut arena, *a, &da);
                    }
                    if self.nodes[*b].needs_grad {
                        let at = transpose_raw(ta.data(), m, k);
                        let db = matmul_nn(&at, &g, k, m, n);
                        accumulate(&mut arena, *b, &db);
                    }
                }
                Op::Transpose { x } => {
                    let t = &self.nodes[id].value;
                    let gt = transpose_raw(&g, t.rows(), t.cols());
                    accumulate(&mut arena, *x, &gt);
                }
                Op::Add { a, b } => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut arena, *a, &g);
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut arena, *b, &g);
                    }
                }
                Op::Sub { a, b } => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut arena, *a, &g);
                    }
                    if self.nodes[*b].needs_grad {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        accumulate(&mut arena, *b, &neg);
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[*a].needs_grad {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(self.nodes[*b].value.data())
                            .map(|(gv, bv)| gv * bv)
                            .collect();
                        accumulate(&mut arena, *a, &da);
                    }
                    if self.nodes[*b].needs_grad {
                        let db: Vec<f64> = g
                            .iter()
                            .zip(self.nodes[*a].value.data())
                            .map(|(gv, av)| gv * av)
                            .collect();
                        accumulate(&mut arena, *b, &db);
                    }
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut arena, *x, &dx);
                }
                Op::AddScalar { x } => {
                    accumulate(&mut arena, *x, &g);
                }
                Op::MulScalar { x, s } => {
                    let sv = self.nodes[*s].value.data()[0];
                    if self.nodes[*x].needs_grad {
                        let dx: Vec<f64> = g.iter().map(|v| v * sv).collect();
                        accumulate(&mut arena, *x, &dx);
                    }
                    if self.nodes[*s].needs_grad {
                        let ds: f64 = g
                            .iter()
                            .zip(self.nodes[*x].value.data())
                            .map(|(gv, xv)| gv * xv)
                            .sum();
                        accumulate(&mut arena, *s, &[ds]);
                    }
                }
                Op::Exp { x } => {
                    let y = &self.nodes[id].value;
                    let dx: Vec<f64> = g.iter().zip(y.data()).map(|(gv, yv)| gv * yv).collect();
                    accumulate(&mut arena, *x, &dx);
                }
                Op::Gelu { x } => {
                    let xv = &self.nodes[*x].value;
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, &v)| gv * gelu_bwd(v))
                        .collect();
                    accumulate(&mut arena, *x, &dx);
                }
                Op::Sum { x } => {
                    let n = self.nodes[*x].value.numel();
                    let dx = vec![g[0]; n];
                    accumulate(&mut arena, *x, &dx);
                }
                Op::Mean { x, axis } => {
                    let xs = self.nodes[*x].value.shape();
                    let (outer, len, inner) = axis_geometry(xs, *axis).expect("validated");
                    let inv = 1.0 / len as f64;
                    let mut dx = vec![0.0f64; self.nodes[*x].value.numel()];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                dx[(o * len + j) * inner + i] = g[o * inner + i] * inv;
                            }
                        }
                    }
                    accumulate(&mut arena, *x, &dx);
                }
                Op::Softmax { x, axis } => {
                    let y = &self.nodes[id].value;
                    let (outer, len, inner) = axis_geometry(y.shape(), *axis).expect("validated");
                    let mut dx = vec![0.0f64; y.numel()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += g[idx(j)] * y.data()[idx(j)];
                            }
                            for j in 0..len {
                                dx[idx(j)] = y.data()[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                    accumulate(&mut arena, *x, &dx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xt = &self.nodes[*x].value;
                    let gt = &self.nodes[*gain].value;
                    let last = *xt.shape().last().unwrap();
                    let rows = xt.numel() / last;
                    let inv_n = 1.0 / last as f64;
                    let mut dx = vec![0.0f64; xt.numel()];
                    let mut dgain = vec![0.0f64; last];
                    let mut dbias = vec![0.0f64; last];
                    for r in 0..rows {
                        let xr = &xt.data()[r * last..(r + 1) * last];
                        let gr = &g[r * last..(r + 1) * last];
                        let mean = xr.iter().sum::<f64>() * inv_n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_n;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        // xhat_j = (x_j - mean) * inv_std
                        let mut mean_gh = 0.0;
                        let mut mean_gh_xhat = 0.0;
                        for j in 0..last {
                            let xhat = (xr[j] - mean) * inv_std;
                            let gh = gr[j] * gt.data()[j];
                            mean_gh += gh;
                            mean_gh_xhat += gh * xhat;
                            dgain[j] += gr[j] * xhat;
                            dbias[j] += gr[j];
                        }
                        mean_gh *= inv_n;
                        mean_gh_xhat *= inv_n;
                        for j in 0..last {
                            let xhat = (xr[j] - mean) * inv_std;
                            let gh = gr[j] * gt.data()[j];
                            dx[r * last + j] = inv_std * (gh - mean_gh - xhat * mean_gh_xhat);
                        }
                    }
                    if self.nodes[*x].needs_grad {
                        accumulate(&mut arena, *x, &dx);
                    }
                    if self.nodes[*gain].needs_grad {
                        accumulate(&mut arena, *gain, &dgain);
                    }
                    if self.nodes[*bias].needs_grad {
                        accumulate(&mut arena, *bias, &dbias);
                    }
                }
                Op::RmsNormRows { x, eps } => {
                    let xt = &self.nodes[*x].value;
                    let last = *xt.shape().last().unwrap();
                    let rows = xt.numel() / last;
                    let inv_n = 1.0 / last as f64;
                    let mut dx = vec![0.0f64; xt.numel()];
                    for r in 0..rows {
                        let xr = &xt.data()[r * last..(r + 1) * last];
                        let gr = &g[r * last..(r + 1) * last];
                        let ms = xr.iter().map(|v| v * v).sum::<f64>() * inv_n;
                        let rr = (ms + eps).sqrt();
                        let gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let c = gx * inv_n / (rr * rr * rr);
                        for j in 0..last {
                            dx[r * last + j] = gr[j] / rr - xr[j] * c;
                        }
                    }
                    accumulate(&mut arena, *x, &dx);
                }
                Op::L2Normalize { x, axis } => {
                    let xt = &self.nodes[*x].value;
                    let y = &self.nodes[id].value;
                    let (outer, len, inner) = axis_geometry(xt.shape(), *axis).expect("validated");
                    let mut dx = vec![0.0f64; xt.numel()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let norm = (0..len)
                                .map(|j| xt.data()[idx(j)] * xt.data()[idx(j)])
                                .sum::<f64>()
                                .sqrt();
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += g[idx(j)] * y.data()[idx(j)];
                            }
                            let inv = 1.0 / norm;
                            for j in 0..len {
                                dx[idx(j)] = (g[idx(j)] - y.data()[idx(j)] * dot) * inv;
                            }
                        }
                    }
                    accumulate(&mut arena, *x, &dx);
                }
                Op::Concat { parts, axis } => {
                    let shape = self.nodes[id].value.shape();
                    let (outer, total, inner) = axis_geometry(shape, *axis).expect("validated");
                    let mut starts = Vec::with_capacity(parts.len());
                    let mut acc = 0usize;
                    for &p in parts {
                        starts.push(acc);
                        acc += self.nodes[p].value.shape()[*axis];
                    }
                    for (pi, &p) in parts.iter().enumerate() {
                        if !self.nodes[p].needs_grad {
                            continue;
                        }
                        let len_p = self.nodes[p].value.shape()[*axis];
                        let mut dp = vec![0.0f64; self.nodes[p].value.numel()];
                        for o in 0..outer {
                            let src = (o * total + starts[pi]) * inner;
                            let dst = o * len_p * inner;
                            dp[dst..dst + len_p * inner]
                                .copy_from_slice(&g[src..src + len_p * inner]);
                        }
                        accumulate(&mut arena, p, &dp);
                    }
                }
                Op::SliceAxis {
                    x,
                    axis,
                    start,
                    len,
                } => {
                    let xs = self.nodes[*x].value.shape();
                    let (outer, full, inner) = axis_geometry(xs, *axis).expect("validated");
                    let mut dx = vec![0.0f64; self.nodes[*x].value.numel()];
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(&mut arena, *x, &dx);
                }
                Op::GatherRows { table, indices } => {
                    let cols = self.nodes[*table].value.cols();
                    let mut dt = vec![0.0f64; self.nodes[*table].value.numel()];
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..cols {
                            dt[i * cols + j] += g[r * cols + j];
                        }
                    }
                    accumulate(&mut arena, *table, &dt);
                }
                Op::CrossEntropyRows { logits, targets } => {
                    let lt = &self.nodes[*logits].value;
                    let (rows, cols) = (lt.rows(), lt.cols());
                    let scale = g[0] / rows as f64;
                    let mut dl = vec![0.0f64; lt.numel()];
                    for r in 0..rows {
                        let xr = &lt.data()[r * cols..(r + 1) * cols];
                        let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = xr.iter().map(|v| (v - mx).exp()).sum();
                        for j in 0..cols {
                            let p = (xr[j] - mx).exp() / z;
                            let ind = if j == targets[r] { 1.0 } else { 0.0 };
                            dl[r * cols + j] = scale * (p - ind);
                        }
                    }
                    accumulate(&mut arena, *logits, &dl);
                }
            }
        }

        for (id, g) in leaf_grads {
            self.nodes[id].value.accumulate_grad(&g);
        }
        Ok(())
    }
}

fn accumulate(arena: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    match &mut arena[id] {
        Some(acc) => {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// tanh-form gelu.
fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_rng(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = simple_rng(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r()).collect()).unwrap()
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[5], vec![3.25; 5]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // [0, ln 3] -> [1/4, 3/4]
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2], vec![0.0, 3.0f64.ln()]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_naive_and_is_shift_invariant() {
        let t = rand_tensor(&[4], 7);
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let y = tape.softmax(x, 0).unwrap();
        // Naive oracle without max subtraction.
        let z: f64 = t.data().iter().map(|v| v.exp()).sum();
        for (j, v) in tape.value(y).data().iter().enumerate() {
            assert!((v - t.data()[j].exp() / z).abs() < 1e-12);
        }
        // Shifted input gives the same output to 1e-12.
        let shifted = Tensor::new(&[4], t.data().iter().map(|v| v + 100.0).collect()).unwrap();
        let xs = tape.constant(shifted);
        let ys = tape.softmax(xs, 0).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(ys).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = rand_tensor(&[3, 6], 13);
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let y = tape.softmax(x, 1).unwrap();
        for r in 0..3 {
            let s: f64 = tape.value(y).data()[r * 6..(r + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[4], vec![2.5; 4]).unwrap());
        let gain = tape.constant(Tensor::ones(&[4]));
        let bias = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        for v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let t = rand_tensor(&[8], 21);
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let gain = tape.constant(Tensor::ones(&[8]));
        let bias = tape.constant(Tensor::zeros(&[8]));
        let eps = 1e-5;
        let y = tape.layer_norm(x, gain, bias, eps).unwrap();
        let mean = t.data().iter().sum::<f64>() / 8.0;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        for (j, v) in tape.value(y).data().iter().enumerate() {
            let expect = (t.data()[j] - mean) / (var + eps).sqrt();
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_keeps_standardized_input() {
        // Mean-zero unit-variance input passes through up to the eps effect.
        let t = {
            let raw = rand_tensor(&[8], 33);
            let mean = raw.data().iter().sum::<f64>() / 8.0;
            let var = raw.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            let std = var.sqrt();
            Tensor::new(&[8], raw.data().iter().map(|v| (v - mean) / std).collect()).unwrap()
        };
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let gain = tape.constant(Tensor::ones(&[8]));
        let bias = tape.constant(Tensor::zeros(&[8]));
        let y = tape.layer_norm(x, gain, bias, 1e-8).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4]));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(
            tape.layer_norm(x, g, b, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn l2_normalize_closed_form() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let y = tape.l2_normalize(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 0.6).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_vanishes_with_dominant_logit() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![60.0, 0.0, 0.0]).unwrap());
        let l = tape.cross_entropy_rows(x, &[0]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-12);
    }

    #[test]
    fn concat_then_split_is_identity() {
        let a = rand_tensor(&[2, 3], 1);
        let b = rand_tensor(&[2, 3], 2);
        let mut tape = Tape::new();
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let cat = tape.concat(&[va, vb], 1).unwrap();
        let parts = tape.split(cat, 1, 2).unwrap();
        assert_eq!(tape.value(parts[0]).data(), a.data());
        assert_eq!(tape.value(parts[1]).data(), b.data());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[3, 2], 5).with_grad());
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let t = rand_tensor(&[4], 9);
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        for (g, v) in tape.grad(x).unwrap().iter().zip(t.data()) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn fanout_accumulates() {
        // loss = sum(x + x) -> grad = 2.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5).with_grad());
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0).with_grad());
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Tape(_))));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[3], 1).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Tape(_))));
    }

    #[test]
    fn detached_loss_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&[3], 1));
        let loss = tape.sum(x).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Tape(_))));
    }

    #[test]
    fn nan_check_mode_fails_fast() {
        let mut tape = Tape::with_nan_check();
        let x = tape.constant(Tensor::new(&[1], vec![800.0]).unwrap());
        // exp(800) overflows to +inf and the checked op reports it.
        assert!(matches!(tape.exp(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(rand_tensor(&[4, 4], 11).with_grad());
            let b = tape.leaf(rand_tensor(&[4, 4], 12).with_grad());
            let p = tape.matmul(a, b).unwrap();
            let s = tape.softmax(p, 1).unwrap();
            let q = tape.mul(s, p).unwrap();
            let loss = tape.sum(q).unwrap();
            tape.backward(loss).unwrap();
            (tape.grad(a).unwrap().to_vec(), tape.grad(b).unwrap().to_vec())
        };
        let (ga1, gb1) = run();
        let (ga2, gb2) = run();
        for (x, y) in ga1.iter().zip(&ga2).chain(gb1.iter().zip(&gb2)) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn gather_rows_scatter_adds_repeated_indices() {
        let mut tape = Tape::new();
        let table = tape.leaf(rand_tensor(&[3, 2], 3).with_grad());
        let g = tape.gather_rows(table, &[1, 1, 0]).unwrap();
        let loss = tape.sum(g).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_slices_sum_to_one_and_shift_invariant(
                rows in 1usize..5,
                cols in 1usize..7,
                axis in 0usize..2,
                shift in -100.0f64..100.0,
                seed in proptest::collection::vec(-30.0f64..30.0, 30),
            ) {
                let data: Vec<f64> = seed.iter().cycle().take(rows * cols).cloned().collect();
                let t = Tensor::matrix(rows, cols, data).unwrap();
                let mut tape = Tape::new();
                let x = tape.constant(t.clone());
                let y = tape.softmax(x, axis).unwrap();
                let (outer, len, inner) = axis_geometry(t.shape(), axis).unwrap();
                for o in 0..outer {
                    for i in 0..inner {
                        let s: f64 = (0..len).map(|j| tape.value(y).data()[(o * len + j) * inner + i]).sum();
                        prop_assert!((s - 1.0).abs() < 1e-9);
                    }
                }
                let shifted = Tensor::matrix(
                    rows, cols, t.data().iter().map(|v| v + shift).collect(),
                ).unwrap();
                let xs = tape.constant(shifted);
                let ys = tape.softmax(xs, axis).unwrap();
                for (a, b) in tape.value(y).data().iter().zip(tape.value(ys).data()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn concat_then_split_roundtrips(
                parts in 1usize..4,
                len in 1usize..4,
                other in 1usize..4,
                axis in 0usize..2,
                seed in proptest::collection::vec(-5.0f64..5.0, 48),
            ) {
                let shape = if axis == 0 { [len, other] } else { [other, len] };
                let tensors: Vec<Tensor> = (0..parts)
                    .map(|p| {
                        let data: Vec<f64> = seed
                            .iter()
                            .cycle()
                            .skip(p * 7)
                            .take(shape[0] * shape[1])
                            .cloned()
                            .collect();
                        Tensor::matrix(shape[0], shape[1], data).unwrap()
                    })
                    .collect();
                let mut tape = Tape::new();
                let vars: Vec<Var> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
                let cat = tape.concat(&vars, axis).unwrap();
                let back = tape.split(cat, axis, parts).unwrap();
                for (orig, piece) in tensors.iter().zip(back) {
                    prop_assert_eq!(tape.value(piece).data(), orig.data());
                }
            }

            #[test]
            fn randomized_graph_gradients_match_finite_differences(
                rows in 2usize..4,
                cols in 2usize..4,
                seed in 0u64..200,
            ) {
                let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
                let mut next = || {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
                };
                let a = Tensor::matrix(rows, cols, (0..rows * cols).map(|_| next()).collect()).unwrap();
                let b = Tensor::matrix(cols, rows, (0..rows * cols).map(|_| next()).collect()).unwrap();
                let params = vec![("a".to_string(), a), ("b".to_string(), b)];
                let report = crate::gradcheck::check_gradients(&params, 1e-5, |tape, v| {
                    let p = tape.matmul(v[0], v[1])?;
                    let sm = tape.softmax(p, 1)?;
                    let g = tape.gelu(sm)?;
                    let n = tape.l2_normalize(g, 1)?;
                    let e = tape.mul(n, n)?;
                    tape.sum(e)
                }).unwrap();
                prop_assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
            }
        }
    }
}
