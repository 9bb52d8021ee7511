//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in execution order; node ids only
//! ever refer to earlier nodes, so the tape is topologically sorted by
//! construction and [`Graph::backward`] walks it in exact reverse.
//!
//! ```
//! use tbt_core::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new(0);
//! let p = store.insert("p", Tensor::vector(vec![1.0, -2.0])).unwrap();
//! let mut g = Graph::new(&store);
//! let x = g.param(p);
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.param(p).unwrap().data(), &[2.0, -4.0]);
//! ```

use std::collections::HashMap;

use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Sum(Var),
    Softmax(Var),
    LogSoftmax { x: Var, clamped: Vec<bool> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv1d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    Depthwise { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    LocalAttention { q: Var, k: Var, v: Var, heads: usize, radius: usize, probs: Vec<f64> },
    SelectiveScan { x: Var, a: Var, b: Var, c: Var, states: Vec<f64> },
    GatherRows { x: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Focal { logits: Var, targets: Vec<f64>, alpha: f64, gamma: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Abs(x)
            | Op::Sum(x)
            | Op::Softmax(x) => vec![*x],
            Op::LogSoftmax { x, .. } | Op::GatherRows { x, .. } | Op::SliceCols { x, .. } => {
                vec![*x]
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv1d { x, w, bias, .. } | Op::Depthwise { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias.iter().copied());
                v
            }
            Op::LocalAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::SelectiveScan { x, a, b, c, .. } => vec![*x, *a, *b, *c],
            Op::ConcatRows(parts) => parts.clone(),
            Op::Focal { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Log clamp shared by every cross-entropy style term.
pub const LOG_FLOOR: f64 = 1e-12;

/// Records operations and computes gradients for one forward pass.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    // test hook; scales every parameter gradient when set
    gradient_fault: Option<f64>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            gradient_fault: None,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Corrupts backward results by a constant factor. Only meant for
    /// negative controls of the gradient checker.
    pub fn inject_gradient_fault(&mut self, factor: f64) {
        self.gradient_fault = Some(factor);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// A free leaf that receives gradient (not tied to the parameter store).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        let t = self.store.get(id).clone();
        let v = self.push_raw(t, Op::Leaf, true);
        self.param_nodes.insert(id, v);
        v
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(TensorError::UnknownNode(v.0))
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.check(v)?;
        if t.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected a matrix, got shape {:?}", t.shape()),
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        Ok(ta.shape().to_vec())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("[{m}, {k}] x [{k2}, {n}]"),
            });
        }
        let out = kernels::matmul(m, k, n, self.value(a).data(), self.value(b).data());
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// `x[.., D] + bias[D]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.check(x)?.cols();
        let tb = self.check(bias)?;
        if tb.rank() != 1 || tb.numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias {:?} for {d} columns", tb.shape()),
            });
        }
        let b = tb.data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        let shape = self.shape(x).to_vec();
        self.push("add_bias", shape, out, Op::AddBias(x, bias))
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let shape = self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(name, shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.check(x)?;
        let shape = t.shape().to_vec();
        let out = t.data().iter().map(|v| f(*v)).collect();
        self.push(name, shape, out, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("scale", x, Op::Scale(x, c), |v| v * c)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, Op::Gelu(x), gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map("softplus", x, Op::Softplus(x), softplus)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map("abs", x, Op::Abs(x), f64::abs)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let s = self.sigmoid(x)?;
        self.mul(x, s)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.check(x)?.data().iter().sum();
        self.push("sum", vec![], vec![total], Op::Sum(x))
    }

    /// Softmax over the trailing axis, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        let (shape, w) = (t.shape().to_vec(), t.cols());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(w) {
            softmax_in_place(row);
        }
        self.push("softmax", shape, out, Op::Softmax(x))
    }

    /// `max(log_softmax(x), ln LOG_FLOOR)` over the trailing axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        let (shape, w) = (t.shape().to_vec(), t.cols());
        let floor = LOG_FLOOR.ln();
        let mut out = t.data().to_vec();
        let mut clamped = vec![false; out.len()];
        for (row, cl) in out.chunks_mut(w).zip(clamped.chunks_mut(w)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for (v, c) in row.iter_mut().zip(cl.iter_mut()) {
                *v -= lse;
                if *v < floor {
                    *v = floor;
                    *c = true;
                }
            }
        }
        self.push("log_softmax", shape, out, Op::LogSoftmax { x, clamped })
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of width D.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.matrix("layer_norm", x)?;
        for p in [gamma, beta] {
            if self.check(p)?.shape() != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!("affine {:?} for width {d}", self.shape(p)),
                });
            }
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let xs = self.value(x).data();
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..d {
                let h = (row[c] - mean) * s;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gs[c] + bs[c];
            }
        }
        self.push(
            "layer_norm",
            vec![rows, d],
            out,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
        )
    }

    /// 1-D convolution of `x: [T, Din]` with `w: [K, Din, Dout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv1d_padded(x, w, bias, stride, padding, padding)
    }

    pub fn conv1d_padded(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad_l: usize,
        pad_r: usize,
    ) -> Result<Var> {
        let (len, din) = self.matrix("conv1d", x)?;
        let wt = self.check(w)?;
        if wt.rank() != 3 || wt.shape()[1] != din {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                detail: format!("kernel {:?} for input channels {din}", wt.shape()),
            });
        }
        let (kernel, dout) = (wt.shape()[0], wt.shape()[2]);
        let geom = self.conv_geom("conv1d", len, kernel, stride, pad_l, pad_r)?;
        if let Some(b) = bias {
            if self.check(b)?.shape() != [dout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d",
                    detail: format!("bias {:?} for {dout} output channels", self.shape(b)),
                });
            }
        }
        let cols = kernels::im2col(self.value(x).data(), din, geom);
        let mut out = kernels::matmul(geom.out_len, kernel * din, dout, &cols, self.value(w).data());
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(o, v)| *o += v);
            }
        }
        self.push("conv1d", vec![geom.out_len, dout], out, Op::Conv1d { x, w, bias, geom })
    }

    fn conv_geom(
        &self,
        op: &'static str,
        len: usize,
        kernel: usize,
        stride: usize,
        pad_l: usize,
        pad_r: usize,
    ) -> Result<ConvGeom> {
        if stride == 0 || kernel == 0 {
            return Err(TensorError::InvalidArgument {
                op,
                detail: format!("kernel {kernel} and stride {stride} must be positive"),
            });
        }
        let out_len = kernels::conv_out_len(len, kernel, stride, pad_l, pad_r);
        if out_len < 1 {
            return Err(TensorError::EmptyOutput { op, len: out_len });
        }
        Ok(ConvGeom {
            len,
            out_len: out_len as usize,
            kernel,
            stride,
            pad_l,
        })
    }

    /// Per-channel convolution of `x: [T, D]` with `w: [K, D]`.
    pub fn depthwise_conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad_l: usize,
        pad_r: usize,
    ) -> Result<Var> {
        let (len, d) = self.matrix("depthwise_conv1d", x)?;
        let (kernel, dw) = self.matrix("depthwise_conv1d", w)?;
        if dw != d {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_conv1d",
                detail: format!("kernel [{kernel}, {dw}] for {d} channels"),
            });
        }
        let geom = self.conv_geom("depthwise_conv1d", len, kernel, stride, pad_l, pad_r)?;
        let mut out = kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), d, geom);
        if let Some(b) = bias {
            let bv = self.check(b)?.data();
            if bv.len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "depthwise_conv1d",
                    detail: format!("bias of {} for {d} channels", bv.len()),
                });
            }
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(bv).for_each(|(o, v)| *o += v);
            }
        }
        self.push(
            "depthwise_conv1d",
            vec![geom.out_len, d],
            out,
            Op::Depthwise { x, w, bias, geom },
        )
    }

    /// Multi-head self-attention where query `t` sees keys in `[t - radius, t + radius]`.
    pub fn local_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, radius: usize) -> Result<Var> {
        let shape = self.same_shape("local_attention", q, k)?;
        self.same_shape("local_attention", q, v)?;
        let (len, dim) = self.matrix("local_attention", q)?;
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "local_attention",
                detail: format!("{dim} channels cannot be split into {heads} heads"),
            });
        }
        let fwd = kernels::local_attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            len,
            dim,
            heads,
            radius,
        );
        self.push(
            "local_attention",
            shape,
            fwd.out,
            Op::LocalAttention { q, k, v, heads, radius, probs: fwd.probs },
        )
    }

    /// Diagonal state-space recurrence with per-step input and output maps.
    /// `x: [T, D]`, `a: [D, N]`, `b, c: [T, N]`.
    pub fn selective_scan(&mut self, x: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let (len, d) = self.matrix("selective_scan", x)?;
        let (da, n) = self.matrix("selective_scan", a)?;
        let bs = self.matrix("selective_scan", b)?;
        let cs = self.matrix("selective_scan", c)?;
        if da != d || bs != (len, n) || cs != (len, n) {
            return Err(TensorError::ShapeMismatch {
                op: "selective_scan",
                detail: format!("x [{len}, {d}], a [{da}, {n}], b {bs:?}, c {cs:?}"),
            });
        }
        let (y, states) = kernels::selective_scan_forward(
            self.value(x).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            len,
            d,
            n,
        );
        self.push("selective_scan", vec![len, d], y, Op::SelectiveScan { x, a, b, c, states })
    }

    /// `out[i] = x[index[i]]` row-wise.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let (rows, d) = self.matrix("gather_rows", x)?;
        if let Some(bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                detail: format!("row {bad} out of {rows}"),
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in &index {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push("gather_rows", vec![index.len(), d], out, Op::GatherRows { x, index })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = match parts.first() {
            Some(p) => self.matrix("concat_rows", *p)?.1,
            None => {
                return Err(TensorError::InvalidArgument {
                    op: "concat_rows",
                    detail: "no inputs".into(),
                })
            }
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = self.matrix("concat_rows", *p)?;
            if c != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("width {c} vs {d}"),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(*p).data());
        }
        self.push("concat_rows", vec![rows, d], out, Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, d) = self.matrix("slice_cols", x)?;
        if start >= end || end > d {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                detail: format!("range {start}..{end} of {d} columns"),
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&src[r * d + start..r * d + end]);
        }
        self.push("slice_cols", vec![rows, end - start], out, Op::SliceCols { x, start })
    }

    /// Element-wise sigmoid focal loss against hard `{0, 1}` targets.
    pub fn sigmoid_focal(&mut self, logits: Var, targets: Vec<f64>, alpha: f64, gamma: f64) -> Result<Var> {
        let t = self.check(logits)?;
        if targets.len() != t.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "sigmoid_focal",
                detail: format!("{} targets for {} logits", targets.len(), t.numel()),
            });
        }
        let shape = t.shape().to_vec();
        let out = t
            .data()
            .iter()
            .zip(&targets)
            .map(|(z, y)| focal_value(*z, *y, alpha, gamma))
            .collect();
        self.push("sigmoid_focal", shape, out, Op::Focal { logits, targets, alpha, gamma })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if root.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for input in node.op.inputs() {
                if input.0 >= idx {
                    return Err(TensorError::Cycle { node: idx, input: input.0 });
                }
            }
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let mut out = Gradients {
            by_node: grads,
            params: self.param_nodes.iter().map(|(p, v)| (*p, *v)).collect(),
            shapes: self.nodes[..=loss.0].iter().map(|n| n.value.shape().to_vec()).collect(),
        };
        out.params.sort();
        if let Some(f) = self.gradient_fault {
            for (_, v) in &out.params {
                if let Some(g) = out.by_node.get_mut(v.0).and_then(Option::as_mut) {
                    g.iter_mut().for_each(|x| *x *= f);
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<f64>| accumulate(grads, v, contrib);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if needs(*a) {
                    // dA = dY · Bᵀ
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, n as isize, 1, val(*b), 1, n as isize, &mut da, false);
                    acc(*a, da);
                }
                if needs(*b) {
                    // dB = Aᵀ · dY
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a), 1, k as isize, g, n as isize, 1, &mut db, false);
                    acc(*b, db);
                }
            }
            Op::AddBias(x, b) => {
                if needs(*b) {
                    acc(*b, column_sums(g, self.nodes[b.0].value.numel()));
                }
                if needs(*x) {
                    acc(*x, g.to_vec());
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Gelu(x) => acc(*x, g.iter().zip(val(*x)).map(|(g, x)| g * gelu_grad(*x)).collect()),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Softplus(x) => acc(*x, g.iter().zip(val(*x)).map(|(g, x)| g * sigmoid(*x)).collect()),
            Op::Abs(x) => acc(*x, g.iter().zip(val(*x)).map(|(g, x)| g * x.signum()).collect()),
            Op::Sum(x) => acc(*x, vec![g[0]; self.nodes[x.0].value.numel()]),
            Op::Softmax(x) => {
                let y = node.value.data();
                let w = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(w).zip(g.chunks(w)).zip(dx.chunks_mut(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..w {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmax { x, clamped } => {
                let w = node.value.cols();
                let xs = val(*x);
                let mut dx = vec![0.0; xs.len()];
                for r in 0..xs.len() / w {
                    let rg = r * w..(r + 1) * w;
                    let mut probs = xs[rg.clone()].to_vec();
                    softmax_in_place(&mut probs);
                    let live: f64 = rg.clone().filter(|&i| !clamped[i]).map(|i| g[i]).sum();
                    for (j, i) in rg.enumerate() {
                        let own = if clamped[i] { 0.0 } else { g[i] };
                        dx[i] = own - probs[j] * live;
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.nodes[gamma.0].value.numel();
                let gs = val(*gamma);
                if needs(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                    acc(*gamma, dg);
                }
                if needs(*beta) {
                    acc(*beta, column_sums(g, d));
                }
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..g.len() / d {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dhh = 0.0;
                        for c in 0..d {
                            let dh = gr[c] * gs[c];
                            mean_dh += dh;
                            mean_dhh += dh * hr[c];
                        }
                        mean_dh /= d as f64;
                        mean_dhh /= d as f64;
                        for c in 0..d {
                            let dh = gr[c] * gs[c];
                            dx[r * d + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dhh);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Conv1d { x, w, bias, geom } => {
                let din = self.shape(*x)[1];
                let dout = self.shape(*w)[2];
                let kd = geom.kernel * din;
                if let Some(b) = bias {
                    if needs(*b) {
                        acc(*b, column_sums(g, dout));
                    }
                }
                if needs(*w) {
                    let cols = kernels::im2col(val(*x), din, *geom);
                    let mut dw = vec![0.0; kd * dout];
                    kernels::gemm(kd, geom.out_len, dout, &cols, 1, kd as isize, g, dout as isize, 1, &mut dw, false);
                    acc(*w, dw);
                }
                if needs(*x) {
                    let mut dcols = vec![0.0; geom.out_len * kd];
                    kernels::gemm(
                        geom.out_len,
                        dout,
                        kd,
                        g,
                        dout as isize,
                        1,
                        val(*w),
                        1,
                        dout as isize,
                        &mut dcols,
                        false,
                    );
                    let mut dx = vec![0.0; geom.len * din];
                    kernels::col2im(&dcols, din, *geom, &mut dx);
                    acc(*x, dx);
                }
            }
            Op::Depthwise { x, w, bias, geom } => {
                let d = self.shape(*x)[1];
                if let Some(b) = bias {
                    if needs(*b) {
                        acc(*b, column_sums(g, d));
                    }
                }
                let (xs, ws) = (val(*x), val(*w));
                let mut dx = vec![0.0; geom.len * d];
                let mut dw = vec![0.0; geom.kernel * d];
                for t in 0..geom.out_len {
                    for k in 0..geom.kernel {
                        if let Some(s) = geom.src(t, k) {
                            for c in 0..d {
                                let go = g[t * d + c];
                                dx[s * d + c] += go * ws[k * d + c];
                                dw[k * d + c] += go * xs[s * d + c];
                            }
                        }
                    }
                }
                if needs(*w) {
                    acc(*w, dw);
                }
                if needs(*x) {
                    acc(*x, dx);
                }
            }
            Op::LocalAttention { q, k, v, heads, radius, probs } => {
                let (len, dim) = (self.shape(*q)[0], self.shape(*q)[1]);
                let (dq, dk, dv) = kernels::local_attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    probs,
                    g,
                    len,
                    dim,
                    *heads,
                    *radius,
                );
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if needs(var) {
                        acc(var, grad);
                    }
                }
            }
            Op::SelectiveScan { x, a, b, c, states } => {
                let (len, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*a)[1];
                let sg = kernels::selective_scan_backward(val(*x), val(*a), val(*b), val(*c), states, g, len, d, n);
                for (var, grad) in [(*x, sg.dx), (*a, sg.da), (*b, sg.db), (*c, sg.dc)] {
                    if needs(var) {
                        acc(var, grad);
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let d = node.value.cols();
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for (r, &i) in index.iter().enumerate() {
                    for c in 0..d {
                        dx[i * d + c] += g[r * d + c];
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    if needs(*p) {
                        acc(*p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = node.value.cols();
                let mut dx = vec![0.0; rows * d];
                for r in 0..rows {
                    dx[r * d + start..r * d + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(*x, dx);
            }
            Op::Focal { logits, targets, alpha, gamma } => {
                let z = val(*logits);
                acc(
                    *logits,
                    g.iter()
                        .zip(z)
                        .zip(targets)
                        .map(|((g, z), y)| g * focal_grad(*z, *y, *alpha, *gamma))
                        .collect(),
                );
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contrib),
    }
}

fn column_sums(g: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for row in g.chunks(d) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not influence it.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        let g = self.by_node.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let (_, v) = self.params.iter().find(|(p, _)| *p == id)?;
        self.wrt(*v)
    }

    /// Parameter gradients, sorted by id.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|(p, v)| self.by_node.get(v.0)?.as_deref().map(|g| (*p, g)))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Sigmoid focal loss for one logit; logs are clamped at [`LOG_FLOOR`].
pub fn focal_value(z: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let floor = LOG_FLOOR.ln();
    let p = sigmoid(z);
    let q = sigmoid(-z);
    if y > 0.5 {
        let lp = (-softplus(-z)).max(floor);
        -alpha * q.powf(gamma) * lp
    } else {
        let lq = (-softplus(z)).max(floor);
        -(1.0 - alpha) * p.powf(gamma) * lq
    }
}

fn focal_grad(z: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let floor = LOG_FLOOR.ln();
    let p = sigmoid(z);
    let q = sigmoid(-z);
    if y > 0.5 {
        let raw = -softplus(-z);
        let (lp, dlp) = if raw > floor { (raw, q) } else { (floor, 0.0) };
        let qg = q.powf(gamma);
        -alpha * (-gamma * p * qg * lp + qg * dlp)
    } else {
        let raw = -softplus(z);
        let (lq, dlq) = if raw > floor { (raw, -p) } else { (floor, 0.0) };
        let pg = p.powf(gamma);
        -(1.0 - alpha) * (gamma * pg * q * lq + pg * dlq)
    }
}
