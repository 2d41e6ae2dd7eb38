//! Reverse-mode gradient tape over whole-tensor operations.
//!
//! A tape is rebuilt for every forward pass: operations append nodes in
//! topological order, `backward` walks them once in reverse. Only nodes on a
//! path from a tracked leaf are given gradient buffers, so a mostly-frozen
//! model pays for the gradients it actually needs.

use std::sync::Arc;

use super::{
    gelu_derivative, gelu_scalar, lanes, layer_norm_kernel, matmul_acc, matmul_nt_acc,
    matmul_tn_acc, sigmoid_scalar, softmax_kernel, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a tensor tracked on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    Relu(Var),
    Abs(Var),
    Ln(Var),
    Sigmoid(Var),
    Gelu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Affine { x: Var, mul: f64 },
    ScaleVar { x: Var, s: Var },
    AddBias { x: Var, b: Var },
    MatMul { a: Var, b: Var },
    Transpose(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Var, Var),
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Var, Var),
    Gather { x: Var, idx: Arc<Vec<i64>> },
    Sum(Var),
    Mean(Var),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    /// Parameter-store index for named leaves; lets the trainer pull
    /// gradients back out without string lookups.
    param: Option<usize>,
}

/// Records a forward computation and differentiates it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            needs_grad,
            param: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone()).expect("node")
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if one was computed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Tracked leaf holding a copy of `t`. Tracked leaves receive gradients;
    /// untracked ones are constants.
    pub fn leaf(&mut self, t: &Tensor, track: bool) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), track)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, vec![1], vec![value], false)
    }

    /// Leaf tagged with a parameter-store index (see `ParamStore::bind`).
    pub fn leaf_param(&mut self, store_index: usize, t: &Tensor, track: bool) -> Var {
        let v = self.leaf(t, track);
        self.nodes[v.0].param = Some(store_index);
        v
    }

    /// (store index, gradient) for every tagged leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| {
            let idx = n.param?;
            let g = self.grads[i].as_deref()?;
            Some((idx, g))
        })
    }

    // ── elementwise binary ──────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(op, shape, data, self.needs(a) || self.needs(b)))
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; at ties the gradient goes to the first operand.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("min", a, b, |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    /// Elementwise maximum; at ties the gradient goes to the first operand.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("max", a, b, |x, y| if x >= y { x } else { y }, Op::Max(a, b))
    }

    // ── elementwise unary ───────────────────────────────────────────

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(op, shape, data, self.needs(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_scalar, Op::Gelu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// `mul·x + add`, elementwise with constants.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        self.unary(x, |v| mul * v + add, Op::Affine { x, mul })
    }

    /// Elementwise product with a tracked scalar (shape `[1]`) variable.
    pub fn scale_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.numel(s) != 1 {
            return Err(Error::InvalidArgument(format!(
                "scale_var scale must be a scalar, got shape {:?}",
                self.shape(s)
            )));
        }
        let sv = self.nodes[s.0].data[0];
        let data = self.nodes[x.0].data.iter().map(|&v| v * sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(Op::ScaleVar { x, s }, shape, data, needs))
    }

    /// Row-broadcast bias add: `x[n, c] + b[c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || self.numel(b) != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: xs.to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (n, c) = (xs[0], xs[1]);
        let mut data = Vec::with_capacity(n * c);
        for r in 0..n {
            let row = &self.nodes[x.0].data[r * c..(r + 1) * c];
            for (j, &v) in row.iter().enumerate() {
                data.push(v + self.nodes[b.0].data[j]);
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddBias { x, b }, vec![n, c], data, needs))
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        matmul_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], data, needs))
    }

    /// Per-token affine map: `x[N, C_in] · w[C_in, C_out] + b[C_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose expects rank 2, got {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::Transpose(x), vec![c, r], data, needs))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for {s:?}"
            )));
        }
        let mut data = vec![0.0; self.numel(x)];
        softmax_kernel(&self.nodes[x.0].data, &self.nodes[x.0].shape, axis, &mut data);
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        Ok(self.push(Op::Softmax { x, axis }, shape, data, needs))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || self.numel(gamma) != s[1] || self.numel(beta) != s[1] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: s.to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (rows, dim) = (s[0], s[1]);
        let mut data = vec![0.0; rows * dim];
        layer_norm_kernel(
            &self.nodes[x.0].data,
            rows,
            dim,
            &self.nodes[gamma.0].data,
            &self.nodes[beta.0].data,
            eps,
            &mut data,
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, vec![rows, dim], data, needs))
    }

    // ── shape plumbing ──────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.nodes[x.0].data.clone();
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape(x), shape.to_vec(), data, needs))
    }

    /// Contiguous slice along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() || start + len > s[0] || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice_rows [{start}, {}) out of range for {s:?}",
                start + len
            )));
        }
        let row: usize = s[1..].iter().product();
        let data = self.nodes[x.0].data[start * row..(start + len) * row].to_vec();
        let mut shape = s.to_vec();
        shape[0] = len;
        let needs = self.needs(x);
        Ok(self.push(Op::SliceRows { x, start }, shape, data, needs))
    }

    /// Concatenation along axis 0; trailing dimensions must agree.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.nodes[a.0].data.clone();
        data.extend_from_slice(&self.nodes[b.0].data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatRows(a, b), shape, data, needs))
    }

    /// Column slice of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice_cols [{start}, {}) out of range for {s:?}",
                start + len
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[x.0].data[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start, len }, vec![rows, len], data, needs))
    }

    /// Column concatenation of two rank-2 tensors with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[a.0].data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.nodes[b.0].data[r * cb..(r + 1) * cb]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatCols(a, b), vec![rows, ca + cb], data, needs))
    }

    /// Index-table gather: `out[k] = x[idx[k]]`, with `-1` meaning zero fill.
    /// Patch extraction and im2col are expressed through this one op.
    pub fn gather(&mut self, x: Var, idx: Arc<Vec<i64>>, out_shape: &[usize]) -> Result<Var> {
        if out_shape.iter().product::<usize>() != idx.len() {
            return Err(Error::InvalidArgument(format!(
                "gather table length {} does not match out shape {out_shape:?}",
                idx.len()
            )));
        }
        let n = self.numel(x) as i64;
        if idx.iter().any(|&i| i >= n) {
            return Err(Error::InvalidArgument("gather index out of range".into()));
        }
        let src = &self.nodes[x.0].data;
        let data = idx
            .iter()
            .map(|&i| if i >= 0 { src[i as usize] } else { 0.0 })
            .collect();
        let needs = self.needs(x);
        Ok(self.push(Op::Gather { x, idx }, out_shape.to_vec(), data, needs))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.nodes[x.0].data.iter().sum();
        let needs = self.needs(x);
        self.push(Op::Sum(x), vec![1], vec![total], needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.numel(x) as f64;
        let total: f64 = self.nodes[x.0].data.iter().sum();
        let needs = self.needs(x);
        self.push(Op::Mean(x), vec![1], vec![total / n], needs)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Accumulate `d loss / d node` for everything on a tracked path.
    /// `loss` must be scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward target must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let (lower_nodes, upper_nodes) = self.nodes.split_at(i);
            let node = &upper_nodes[0];
            let (lower_grads, upper_grads) = self.grads.split_at_mut(i);
            let g = upper_grads[0].as_ref().expect("checked above");

            let mut sink = GradSink {
                nodes: lower_nodes,
                grads: lower_grads,
            };

            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    sink.accumulate(*a, |buf| add_assign(buf, g));
                    sink.accumulate(*b, |buf| add_assign(buf, g));
                }
                Op::Sub(a, b) => {
                    sink.accumulate(*a, |buf| add_assign(buf, g));
                    sink.accumulate(*b, |buf| sub_assign(buf, g));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&lower_nodes[a.0].data, &lower_nodes[b.0].data);
                    sink.accumulate(*a, |buf| mul_add_assign(buf, g, bv));
                    sink.accumulate(*b, |buf| mul_add_assign(buf, g, av));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&lower_nodes[a.0].data, &lower_nodes[b.0].data);
                    sink.accumulate(*a, |buf| {
                        for ((o, &gv), &y) in buf.iter_mut().zip(g).zip(bv) {
                            *o += gv / y;
                        }
                    });
                    sink.accumulate(*b, |buf| {
                        for (((o, &gv), &x), &y) in buf.iter_mut().zip(g).zip(av).zip(bv) {
                            *o -= gv * x / (y * y);
                        }
                    });
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(node.op, Op::Min(..));
                    let (av, bv) = (&lower_nodes[a.0].data, &lower_nodes[b.0].data);
                    sink.accumulate(*a, |buf| {
                        for (((o, &gv), &x), &y) in buf.iter_mut().zip(g).zip(av).zip(bv) {
                            let take = if is_min { x <= y } else { x >= y };
                            if take {
                                *o += gv;
                            }
                        }
                    });
                    sink.accumulate(*b, |buf| {
                        for (((o, &gv), &x), &y) in buf.iter_mut().zip(g).zip(av).zip(bv) {
                            let take = if is_min { x <= y } else { x >= y };
                            if !take {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::Relu(x) => {
                    let xv = &lower_nodes[x.0].data;
                    sink.accumulate(*x, |buf| {
                        for ((o, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                            if v > 0.0 {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::Abs(x) => {
                    let xv = &lower_nodes[x.0].data;
                    sink.accumulate(*x, |buf| {
                        for ((o, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                            *o += gv * if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
                        }
                    });
                }
                Op::Ln(x) => {
                    let xv = &lower_nodes[x.0].data;
                    sink.accumulate(*x, |buf| {
                        for ((o, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                            *o += gv / v;
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let yv = &node.data;
                    sink.accumulate(*x, |buf| {
                        for ((o, &gv), &y) in buf.iter_mut().zip(g).zip(yv) {
                            *o += gv * y * (1.0 - y);
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xv = &lower_nodes[x.0].data;
                    sink.accumulate(*x, |buf| {
                        for ((o, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                            *o += gv * gelu_derivative(v);
                        }
                    });
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &lower_nodes[x.0].data;
                    let (lo, hi) = (*lo, *hi);
                    sink.accumulate(*x, |buf| {
                        for ((o, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                            if v > lo && v < hi {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::Affine { x, mul } => {
                    let m = *mul;
                    sink.accumulate(*x, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o += gv * m;
                        }
                    });
                }
                Op::ScaleVar { x, s } => {
                    let sv = lower_nodes[s.0].data[0];
                    let xv = &lower_nodes[x.0].data;
                    sink.accumulate(*x, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o += gv * sv;
                        }
                    });
                    sink.accumulate(*s, |buf| {
                        buf[0] += g.iter().zip(xv).map(|(&gv, &v)| gv * v).sum::<f64>();
                    });
                }
                Op::AddBias { x, b } => {
                    let cols = lower_nodes[b.0].data.len();
                    sink.accumulate(*x, |buf| add_assign(buf, g));
                    sink.accumulate(*b, |buf| {
                        for (k, &gv) in g.iter().enumerate() {
                            buf[k % cols] += gv;
                        }
                    });
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (lower_nodes[a.0].shape[0], lower_nodes[a.0].shape[1]);
                    let n = lower_nodes[b.0].shape[1];
                    let (av, bv) = (&lower_nodes[a.0].data, &lower_nodes[b.0].data);
                    sink.accumulate(*a, |buf| matmul_nt_acc(g, bv, m, n, k, buf));
                    sink.accumulate(*b, |buf| matmul_tn_acc(av, g, m, k, n, buf));
                }
                Op::Transpose(x) => {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    sink.accumulate(*x, |buf| {
                        for i in 0..r {
                            for j in 0..c {
                                buf[j * r + i] += g[i * c + j];
                            }
                        }
                    });
                }
                Op::Softmax { x, axis } => {
                    let yv = &node.data;
                    let (outer, lane, inner) = lanes(&node.shape, *axis);
                    sink.accumulate(*x, |buf| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * lane * inner + i;
                                let mut dot = 0.0;
                                for l in 0..lane {
                                    let k = base + l * inner;
                                    dot += g[k] * yv[k];
                                }
                                for l in 0..lane {
                                    let k = base + l * inner;
                                    buf[k] += yv[k] * (g[k] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (rows, dim) = (node.shape[0], node.shape[1]);
                    let xv = &lower_nodes[x.0].data;
                    let gv_ = &lower_nodes[gamma.0].data;
                    let inv_d = 1.0 / dim as f64;
                    sink.accumulate(*x, |buf| {
                        for r in 0..rows {
                            let row = &xv[r * dim..(r + 1) * dim];
                            let grow = &g[r * dim..(r + 1) * dim];
                            let mean = row.iter().sum::<f64>() * inv_d;
                            let var =
                                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_d;
                            let rstd = 1.0 / (var + eps).sqrt();
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..dim {
                                let gy = grow[j] * gv_[j];
                                let xh = (row[j] - mean) * rstd;
                                s1 += gy;
                                s2 += gy * xh;
                            }
                            let out = &mut buf[r * dim..(r + 1) * dim];
                            for j in 0..dim {
                                let gy = grow[j] * gv_[j];
                                let xh = (row[j] - mean) * rstd;
                                out[j] += rstd * (gy - inv_d * s1 - xh * inv_d * s2);
                            }
                        }
                    });
                    sink.accumulate(*gamma, |buf| {
                        for r in 0..rows {
                            let row = &xv[r * dim..(r + 1) * dim];
                            let grow = &g[r * dim..(r + 1) * dim];
                            let mean = row.iter().sum::<f64>() * inv_d;
                            let var =
                                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_d;
                            let rstd = 1.0 / (var + eps).sqrt();
                            for j in 0..dim {
                                buf[j] += grow[j] * (row[j] - mean) * rstd;
                            }
                        }
                    });
                    sink.accumulate(*beta, |buf| {
                        for r in 0..rows {
                            for j in 0..dim {
                                buf[j] += g[r * dim + j];
                            }
                        }
                    });
                }
                Op::Reshape(x) => {
                    sink.accumulate(*x, |buf| add_assign(buf, g));
                }
                Op::SliceRows { x, start } => {
                    let row: usize = node.shape[1..].iter().product();
                    let offset = start * row;
                    sink.accumulate(*x, |buf| {
                        for (k, &gv) in g.iter().enumerate() {
                            buf[offset + k] += gv;
                        }
                    });
                }
                Op::ConcatRows(a, b) => {
                    let a_len = lower_nodes[a.0].data.len();
                    sink.accumulate(*a, |buf| add_assign(buf, &g[..a_len]));
                    sink.accumulate(*b, |buf| add_assign(buf, &g[a_len..]));
                }
                Op::SliceCols { x, start, len } => {
                    let cols = lower_nodes[x.0].shape[1];
                    let rows = node.shape[0];
                    sink.accumulate(*x, |buf| {
                        for r in 0..rows {
                            for j in 0..*len {
                                buf[r * cols + start + j] += g[r * len + j];
                            }
                        }
                    });
                }
                Op::ConcatCols(a, b) => {
                    let rows = node.shape[0];
                    let ca = lower_nodes[a.0].shape[1];
                    let cb = lower_nodes[b.0].shape[1];
                    sink.accumulate(*a, |buf| {
                        for r in 0..rows {
                            for j in 0..ca {
                                buf[r * ca + j] += g[r * (ca + cb) + j];
                            }
                        }
                    });
                    sink.accumulate(*b, |buf| {
                        for r in 0..rows {
                            for j in 0..cb {
                                buf[r * cb + j] += g[r * (ca + cb) + ca + j];
                            }
                        }
                    });
                }
                Op::Gather { x, idx } => {
                    sink.accumulate(*x, |buf| {
                        for (k, &i) in idx.iter().enumerate() {
                            if i >= 0 {
                                buf[i as usize] += g[k];
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let gv = g[0];
                    sink.accumulate(*x, |buf| {
                        for o in buf.iter_mut() {
                            *o += gv;
                        }
                    });
                }
                Op::Mean(x) => {
                    let gv = g[0] / lower_nodes[x.0].data.len() as f64;
                    sink.accumulate(*x, |buf| {
                        for o in buf.iter_mut() {
                            *o += gv;
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

/// Lazily allocates gradient buffers for input nodes during backward.
struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()]);
        f(buf);
    }
}

fn add_assign(out: &mut [f64], g: &[f64]) {
    for (o, &v) in out.iter_mut().zip(g) {
        *o += v;
    }
}

fn sub_assign(out: &mut [f64], g: &[f64]) {
    for (o, &v) in out.iter_mut().zip(g) {
        *o -= v;
    }
}

fn mul_add_assign(out: &mut [f64], g: &[f64], other: &[f64]) {
    for ((o, &gv), &w) in out.iter_mut().zip(g).zip(other) {
        *o += gv * w;
    }
}
