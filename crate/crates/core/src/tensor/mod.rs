//! Dense f64 tensors and the numeric kernels shared by the value-level ops
//! and the gradient tape.
//!
//! A [`Tensor`] is a plain row-major value: shape plus flat data, immutable
//! once built and safe to share across threads. Anything that needs
//! gradients goes through [`tape::Tape`], which records operations on
//! tracked variables and replays them in reverse.

mod gradcheck;
mod tape;

pub use gradcheck::{central_diff, grad_check, max_rel_error};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// N-dimensional dense array of 64-bit reals, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value at a multi-dimensional index.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &c) in index.iter().enumerate() {
            debug_assert!(c < self.shape[i]);
            flat = flat * self.shape[i] + c;
        }
        self.data[flat]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Bit-level equality; distinguishes -0.0 from 0.0 and fails on NaN.
pub fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape == b.shape
        && a.data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

// ── kernels ─────────────────────────────────────────────────────────

/// C[m,n] += A[m,k] · B[k,n].
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] · B[n,k]ᵀ (row-dot form).
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n].
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for p in 0..m {
        let a_row = &a[p * k..(p + 1) * k];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * bv;
            }
        }
    }
}

/// Lane decomposition of `shape` around `axis`: (outer, lane, inner).
pub(crate) fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

/// Max-stabilized softmax along one axis, written into `out` (same layout).
pub(crate) fn softmax_kernel(x: &[f64], shape: &[usize], axis: usize, out: &mut [f64]) {
    let (outer, lane, inner) = lanes(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut max = f64::NEG_INFINITY;
            for l in 0..lane {
                max = max.max(x[base + l * inner]);
            }
            let mut sum = 0.0;
            for l in 0..lane {
                let e = (x[base + l * inner] - max).exp();
                out[base + l * inner] = e;
                sum += e;
            }
            for l in 0..lane {
                out[base + l * inner] /= sum;
            }
        }
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-row layer norm over `[rows, dim]`; gamma/beta have length `dim`.
pub(crate) fn layer_norm_kernel(
    x: &[f64],
    rows: usize,
    dim: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
) {
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        let out_row = &mut out[r * dim..(r + 1) * dim];
        for j in 0..dim {
            out_row[j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
    }
}

// ── value-level ops ─────────────────────────────────────────────────

/// Per-token affine map: `out[n, j] = Σ_i x[n,i]·weight[i,j] + bias[j]`.
pub fn linear_per_token(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || weight.rank() != 2 || x.shape[1] != weight.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "linear_per_token",
            lhs: x.shape.clone(),
            rhs: weight.shape.clone(),
        });
    }
    if bias.numel() != weight.shape[1] {
        return Err(Error::ShapeMismatch {
            op: "linear_per_token bias",
            lhs: weight.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let (n, c_in, c_out) = (x.shape[0], x.shape[1], weight.shape[1]);
    let mut data = Vec::with_capacity(n * c_out);
    for _ in 0..n {
        data.extend_from_slice(bias.data());
    }
    matmul_acc(x.data(), weight.data(), n, c_in, c_out, &mut data);
    Tensor::new(vec![n, c_out], data)
}

/// Max-stabilized softmax along `axis`; outputs are nonnegative and sum to 1.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::InvalidArgument(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape
        )));
    }
    if x.shape[axis] == 0 {
        return Err(Error::InvalidArgument("softmax along empty axis".into()));
    }
    let mut out = vec![0.0; x.numel()];
    softmax_kernel(x.data(), &x.shape, axis, &mut out);
    Tensor::new(x.shape.clone(), out)
}

/// Row-wise layer normalization with affine scale and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "layer_norm expects [rows, dim], got {:?}",
            x.shape
        )));
    }
    let (rows, dim) = (x.shape[0], x.shape[1]);
    if gamma.numel() != dim || beta.numel() != dim {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    let mut out = vec![0.0; x.numel()];
    layer_norm_kernel(x.data(), rows, dim, gamma.data(), beta.data(), eps, &mut out);
    Tensor::new(x.shape.clone(), out)
}

/// Elementwise GELU (tanh approximation).
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}
