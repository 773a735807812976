//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]; node ids are assigned in
//! creation order, so inputs always precede their consumers and a single
//! reverse sweep visits each node once.
//!
//! Binary elementwise ops broadcast only when one operand is a scalar or its
//! shape equals the trailing axes of the other (e.g. a row bias). Anything
//! else is a shape error.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{axis_strides, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
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
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    SmoothL1(Var),
    Maximum(Var, Var),
    Softmax(Var, usize),
    LogSoftmax(Var),
    LayerNorm(Var, f64),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    MeanAxis(Var, usize),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Unfold(Var, usize, usize),
    ScaleRows(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Softplus(..) => "softplus",
            Op::SmoothL1(..) => "smooth_l1",
            Op::Maximum(..) => "maximum",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::MeanAxis(..) => "mean_over_axis",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::Unfold(..) => "unfold_time",
            Op::ScaleRows(..) => "scale_rows",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
    no_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` took part in it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient with respect to a bound parameter; zero-filled when the
    /// parameter was bound but unused, `None` if it was never bound.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let var = (*self.params.get(id.index())?)?;
        Some(
            self.get(var)
                .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0])),
        )
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn no_grad() -> Self {
        Tape {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && !self.no_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter to this tape; repeated binds return the
    /// same node. A tape must only ever see one store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.params.len() <= id.index() {
            self.params.resize(id.index() + 1, None);
        }
        if let Some(v) = self.params[id.index()] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.params[id.index()] = Some(v);
        v
    }

    /// Name of the earliest op whose output is not finite, with its node id.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str, Option<ParamId>)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name(), n.param))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), ng))
    }

    // ---- elementwise ----------------------------------------------------

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if sa == sb || lb == 1 || (sb.len() < sa.len() && sa.ends_with(sb)) {
            Ok(sa.to_vec())
        } else if la == 1 || (sa.len() < sb.len() && sb.ends_with(sa)) {
            Ok(sb.to_vec())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.broadcast_shape(op_name, a, b)?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let (la, lb) = (xa.len(), xb.len());
        let n: usize = shape.iter().product();
        let out = (0..n).map(|i| f(xa[i % la], xb[i % lb])).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum of two equally shaped tensors; ties route the
    /// gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("maximum", self.shape(a), self.shape(b)));
        }
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(v, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, libm::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, libm::exp, Op::Exp(a))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Huber loss with unit threshold, elementwise.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let ax = libm::fabs(x);
                if ax < 1.0 {
                    0.5 * x * x
                } else {
                    ax - 0.5
                }
            },
            Op::SmoothL1(a),
        )
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Contract(alloc::format!(
                "softmax axis {axis} out of range for shape {s:?}"
            )));
        }
        let (outer, len, inner) = axis_strides(&s, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for k in 0..len {
                    m = m.max(x[idx(k)]);
                }
                let mut z = 0.0;
                for k in 0..len {
                    let e = libm::exp(x[idx(k)] - m);
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(s, out)?, Op::Softmax(a, axis), ng))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + libm::log(row.iter().map(|&x| libm::exp(x - m)).sum::<f64>());
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmax(a), ng)
    }

    /// Normalises each row (last axis) to zero mean, unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(a);
        self.push(v, Op::LayerNorm(a, eps), ng)
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(alloc::format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_strides(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::Contract(alloc::format!(
                "slice [{start}, {}) on axis {axis} out of range for shape {s:?}",
                start + len
            )));
        }
        let (outer, alen, inner) = axis_strides(&s, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice(a, axis, start), ng))
    }

    pub fn mean_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Contract(alloc::format!(
                "mean axis {axis} out of range for shape {s:?}"
            )));
        }
        let (outer, len, inner) = axis_strides(&s, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * len + k) * inner + i];
                }
            }
        }
        for v in &mut out {
            *v /= len as f64;
        }
        let mut shape = s;
        shape.remove(axis);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis(a, axis), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// Row lookup `table[ids[r]]` for a 2-D table, e.g. token embeddings.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || ids.is_empty() {
            return Err(Error::shape("gather_rows", t.shape(), &[ids.len()]));
        }
        let (r, c) = (t.rows(), t.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(alloc::format!(
                "row id {bad} out of range for table with {r} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), c], out)?,
            Op::GatherRows(table, ids.to_vec()),
            ng,
        ))
    }

    /// Temporal im2col: row `t` of the `T × (kernel·D)` output holds frames
    /// `t - left .. t - left + kernel` of `a: T × D`, zero-padded.
    pub fn unfold_time(&mut self, a: Var, kernel: usize, left: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || kernel == 0 {
            return Err(Error::shape("unfold_time", s, &[kernel]));
        }
        let (t_len, d) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; t_len * kernel * d];
        for t in 0..t_len {
            for k in 0..kernel {
                let src = t as isize - left as isize + k as isize;
                if src < 0 || src as usize >= t_len {
                    continue;
                }
                let src = src as usize;
                let dst = (t * kernel + k) * d;
                out[dst..dst + d].copy_from_slice(&x[src * d..(src + 1) * d]);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![t_len, kernel * d], out)?,
            Op::Unfold(a, kernel, left),
            ng,
        ))
    }

    /// Multiplies row `t` of `x: T × D` by `r[t]`.
    pub fn scale_rows(&mut self, x: Var, r: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(r));
        if sx.len() != 2 || sr.len() != 1 || sx[0] != sr[0] {
            return Err(Error::shape("scale_rows", sx, sr));
        }
        let d = sx[1];
        let rv = self.value(r).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * rv[i / d])
            .collect();
        let shape = sx.to_vec();
        let ng = self.ng(x) || self.ng(r);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaleRows(x, r), ng))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.ng(*a) {
                    let da = slot(grads, *a, m * k);
                    gemm_nt_acc(g, self.value(*b).data(), da, m, n, k);
                }
                if self.ng(*b) {
                    let db = slot(grads, *b, k * n);
                    gemm_tn_acc(self.value(*a).data(), g, db, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if self.ng(*a) {
                    let da = slot(grads, *a, m * k);
                    gemm_acc(g, self.value(*b).data(), da, m, n, k);
                }
                if self.ng(*b) {
                    let db = slot(grads, *b, n * k);
                    gemm_tn_acc(g, self.value(*a).data(), db, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let da = slot(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.ng(*a) {
                    let la = self.value(*a).len();
                    let da = slot(grads, *a, la);
                    for (i, &gi) in g.iter().enumerate() {
                        da[i % la] += gi;
                    }
                }
                if self.ng(*b) {
                    let lb = self.value(*b).len();
                    let db = slot(grads, *b, lb);
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % lb] += sign * gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let (la, lb) = (xa.len(), xb.len());
                if self.ng(*a) {
                    let da = slot(grads, *a, la);
                    for (i, &gi) in g.iter().enumerate() {
                        da[i % la] += gi * xb[i % lb];
                    }
                }
                if self.ng(*b) {
                    let db = slot(grads, *b, lb);
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % lb] += gi * xa[i % la];
                    }
                }
            }
            Op::Maximum(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let da = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        if xa[i] >= xb[i] {
                            da[i] += g[i];
                        }
                    }
                }
                if self.ng(*b) {
                    let db = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        if xa[i] < xb[i] {
                            db[i] += g[i];
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                let da = slot(grads, *a, g.len());
                for (d, &gi) in da.iter_mut().zip(g) {
                    *d += s * gi;
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                let da = slot(grads, *a, g.len());
                for (d, &gi) in da.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Sigmoid(a) => self.elementwise_back(*a, g, grads, |_, yi| yi * (1.0 - yi), y),
            Op::Relu(a) => {
                self.elementwise_back(*a, g, grads, |xi, _| if xi > 0.0 { 1.0 } else { 0.0 }, y)
            }
            Op::Tanh(a) => self.elementwise_back(*a, g, grads, |_, yi| 1.0 - yi * yi, y),
            Op::Exp(a) => self.elementwise_back(*a, g, grads, |_, yi| yi, y),
            Op::Softplus(a) => self.elementwise_back(*a, g, grads, |xi, _| sigmoid(xi), y),
            Op::SmoothL1(a) => self.elementwise_back(
                *a,
                g,
                grads,
                |xi, _| {
                    if libm::fabs(xi) < 1.0 {
                        xi
                    } else if xi > 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                },
                y,
            ),
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_strides(node.value.shape(), *axis);
                let da = slot(grads, *a, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            da[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                let da = slot(grads, *a, g.len());
                for ((dr, gr), yr) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let gs: f64 = gr.iter().sum();
                    for k in 0..c {
                        dr[k] += gr[k] - libm::exp(yr[k]) * gs;
                    }
                }
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a).data();
                let c = node.value.cols();
                let da = slot(grads, *a, g.len());
                for r in 0..g.len() / c {
                    let xr = &x[r * c..(r + 1) * c];
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mean = xr.iter().sum::<f64>() / c as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / libm::sqrt(var + eps);
                    let gm = gr.iter().sum::<f64>() / c as f64;
                    let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for k in 0..c {
                        da[r * c + k] += inv * (gr[k] - gm - yr[k] * gym);
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_strides(node.value.shape(), *axis);
                let mut offset = 0;
                let total = node.value.shape()[*axis];
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.ng(p) {
                        let dp = slot(grads, p, outer * len * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for k in 0..len * inner {
                                dp[dst + k] += g[src + k];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let s = self.shape(*a);
                let (outer, alen, inner) = axis_strides(s, *axis);
                let len = node.value.shape()[*axis];
                let da = slot(grads, *a, outer * alen * inner);
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    let src = o * len * inner;
                    for k in 0..len * inner {
                        da[dst + k] += g[src + k];
                    }
                }
            }
            Op::MeanAxis(a, axis) => {
                let s = self.shape(*a);
                let (outer, len, inner) = axis_strides(s, *axis);
                let da = slot(grads, *a, outer * len * inner);
                let w = 1.0 / len as f64;
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            da[(o * len + k) * inner + i] += g[o * inner + i] * w;
                        }
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = self.value(*a).len();
                let w = if matches!(node.op, Op::Mean(..)) {
                    g[0] / n as f64
                } else {
                    g[0]
                };
                for d in slot(grads, *a, n).iter_mut() {
                    *d += w;
                }
            }
            Op::GatherRows(table, ids) => {
                let t = self.value(*table);
                let c = t.cols();
                let dt = slot(grads, *table, t.len());
                for (r, &id) in ids.iter().enumerate() {
                    for k in 0..c {
                        dt[id * c + k] += g[r * c + k];
                    }
                }
            }
            Op::Unfold(a, kernel, left) => {
                let s = self.shape(*a);
                let (t_len, d) = (s[0], s[1]);
                let da = slot(grads, *a, t_len * d);
                for t in 0..t_len {
                    for k in 0..*kernel {
                        let src = t as isize - *left as isize + k as isize;
                        if src < 0 || src as usize >= t_len {
                            continue;
                        }
                        let src = src as usize;
                        let off = (t * kernel + k) * d;
                        for j in 0..d {
                            da[src * d + j] += g[off + j];
                        }
                    }
                }
            }
            Op::ScaleRows(x, r) => {
                let d = self.shape(*x)[1];
                let (xv, rv) = (self.value(*x).data(), self.value(*r).data());
                if self.ng(*x) {
                    let dx = slot(grads, *x, xv.len());
                    for (i, &gi) in g.iter().enumerate() {
                        dx[i] += gi * rv[i / d];
                    }
                }
                if self.ng(*r) {
                    let dr = slot(grads, *r, rv.len());
                    for (i, &gi) in g.iter().enumerate() {
                        dr[i / d] += gi * xv[i];
                    }
                }
            }
        }
    }

    fn elementwise_back(
        &self,
        a: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        deriv: impl Fn(f64, f64) -> f64,
        y: &[f64],
    ) {
        let x = self.value(a).data();
        let da = slot(grads, a, g.len());
        for i in 0..g.len() {
            da[i] += g[i] * deriv(x[i], y[i]);
        }
    }

    /// Diagnostic name for the op that produced `v`.
    pub fn op_name(&self, v: Var) -> String {
        String::from(self.nodes[v.0].op.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let p = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(p), tape.value(i2));

        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t2(&[&[1.0], &[1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, [2, 3]);
                assert_eq!(rhs, [2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::from_vec(vec![1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert!(tape.value(y).is_finite());
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(tape.value(y).data()[1] < 1e-300);

        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let y = tape.softmax(x, 0).unwrap();
        for (v, e) in tape.value(y).data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((v - e).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[1.0, 5.0], &[1.0, -5.0]]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y);
        assert!((v.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((v.at(0, 1) + v.at(1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.scalar_value(s), 0.5);
        let m3 = tape.constant(Tensor::scalar(-3.0));
        let r = tape.relu(m3);
        assert_eq!(tape.scalar_value(r), 0.0);
        let x = tape.constant(t2(&[&[1.0, 3.0], &[5.0, 7.0]]));
        let m = tape.mean_over_axis(x, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
    }

    #[test]
    fn sigmoid_stays_open_interval() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-30.0, 30.0]));
        let y = tape.sigmoid(x);
        for &v in tape.value(y).data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn broadcasting_rules() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::zeros(&[3, 4]));
        let row = tape.constant(Tensor::ones(&[4]));
        let col = tape.constant(Tensor::ones(&[3]));
        let s = tape.constant(Tensor::scalar(2.0));
        assert!(tape.add(m, row).is_ok());
        assert!(tape.mul(s, m).is_ok());
        assert!(tape.add(m, col).is_err());
    }

    #[test]
    fn concat_off_axis_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(tape.concat(&[a, b], 1).is_err());
        assert!(tape.concat(&[a, b], 0).is_ok());
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), Tensor::ones(&[2, 3]));

        let mut tape = Tape::new();
        let xv = Tensor::from_fn(&[4], |i| i as f64 * 0.7 - 1.0);
        let x = tape.leaf(xv.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap().get(x).unwrap();
        for (gi, xi) in g.data().iter().zip(xv.data()) {
            assert_eq!(*gi, 2.0 * xi);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn no_grad_tape_records_no_gradients() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        assert!(!tape.requires_grad(x));
    }
}
