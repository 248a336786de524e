//! Dense row-major `f64` tensors and the handful of kernels the model needs.
//!
//! Everything here is a pure function over immutable inputs. Reductions run
//! sequentially in row-major order so results are bit-reproducible.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.iter().any(|&s| s == 0) {
            return Err(Error::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `m × n` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Data("ragged rows".into()));
        }
        Self::new(&[m, n], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Normal(0, std) truncated to ±2 std by rejection.
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| loop {
                let z: f64 = normal.sample(rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count when viewed as a matrix; a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    /// Elementwise `self + other` for identical shapes.
    pub fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("add", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Arithmetic mean of the rows, as a 1-D tensor of length `cols`.
    pub fn mean_rows(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.rows()).collect();
        self.subset_mean(&idx)
    }

    /// Mean of the selected rows; `rows` must be non-empty.
    pub fn subset_mean(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut acc = vec![0.0; c];
        for &r in rows {
            for (a, x) in acc.iter_mut().zip(self.row(r)) {
                *a += x;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        Tensor::vector(acc.into_iter().map(|a| a * inv).collect())
    }
}

/// `out[m×p] += a[m×k] · b[k×p]`, i-k-j order.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// Dot product with four independent partial sums (fixed order, so the
/// result is deterministic).
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[m×p] += a[m×k] · bᵀ` where `b` is stored `p×k`.
pub(crate) fn gemm_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * p + j] += dot(a_row, b_row);
        }
    }
}

/// `out[k×p] += aᵀ · b` where `a` is stored `m×k` and `b` is `m×p`.
pub(crate) fn gemm_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let b_row = &b[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let out_row = &mut out[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// Matrix product of `a[m×k]` and `b[k×p]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, p) = (b.rows(), b.cols());
    if k != k2 || b.shape.len() > 2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * p];
    gemm_acc(&a.data, &b.data, &mut out, m, k, p);
    Ok(Tensor {
        shape: vec![m, p],
        data: out,
    })
}

/// Row-wise softmax with an optional additive mask of the same shape.
///
/// Masked entries (`-inf` after addition) come out exactly zero. The row
/// maximum is taken over finite entries only.
pub fn softmax_rows(logits: &Tensor, additive_mask: Option<&Tensor>) -> Result<Tensor> {
    if let Some(mask) = additive_mask {
        if mask.shape != logits.shape {
            return Err(Error::shape("softmax_rows", &logits.shape, &mask.shape));
        }
    }
    let (m, n) = (logits.rows(), logits.cols());
    let mut out = logits.data.clone();
    if let Some(mask) = additive_mask {
        for (o, mk) in out.iter_mut().zip(&mask.data) {
            *o += mk;
        }
    }
    for r in 0..m {
        softmax_in_place(&mut out[r * n..(r + 1) * n]).ok_or(Error::DegenerateRow { row: r })?;
    }
    Ok(Tensor {
        shape: logits.shape.clone(),
        data: out,
    })
}

/// Softmax over one row in place; `None` if no entry is finite.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> Option<()> {
    let max = row
        .iter()
        .copied()
        .filter(|x| x.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = if x.is_finite() { (*x - max).exp() } else { 0.0 };
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
    Some(())
}

/// Per-row normalization to zero mean and unit variance, then `gain · x + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape("layer_norm", &x.shape, &gain.shape));
    }
    let mut out = vec![0.0; x.len()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let (mean, rstd) = row_stats(row, eps);
        for j in 0..d {
            out[r * d + j] = (row[j] - mean) * rstd * gain.data[j] + bias.data[j];
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Mean and reciprocal standard deviation (biased variance) of one row.
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
