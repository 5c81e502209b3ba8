//! Forward kernels shared by the tape and the eager tensor functions.

use super::Tensor;
use crate::{Error, Result};

/// sqrt(2 / pi), the tanh-approximation GELU scale.
pub const GELU_SCALE: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh-approximation GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `dC · Bᵀ` accumulated into `da` (m×k).
pub(crate) fn matmul_grad_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += dcrow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `Aᵀ · dC` accumulated into `db` (k×n).
pub(crate) fn matmul_grad_b(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (o, g) in dbrow.iter_mut().zip(dcrow) {
                *o += av * g;
            }
        }
    }
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Normalized rows plus the saved `xhat` and per-row reciprocal std.
pub(crate) struct LayerNormOut {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_raw(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> LayerNormOut {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let denom = (var + eps).sqrt();
        // eps = 0 on a constant row: define the normalized row as zero.
        let rs = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    LayerNormOut { y, xhat, rstd }
}

pub(crate) fn softmax_raw(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum += *o;
        }
        or.iter_mut().for_each(|o| *o /= sum);
    }
    out
}

pub(crate) fn log_softmax_raw(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = xr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, v) in or.iter_mut().zip(xr) {
            *o = v - max - lse;
        }
    }
    out
}

/// `x · Φ(x)` with the tanh approximation
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x³)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// im2col for a 1-D convolution over the time axis of a `T×C` input.
pub(crate) fn unfold_raw(x: &[f64], channels: usize, kernel: usize, stride: usize) -> (Vec<f64>, usize) {
    let t = x.len() / channels;
    let out_t = (t - kernel) / stride + 1;
    let width = kernel * channels;
    let mut out = vec![0.0; out_t * width];
    for o in 0..out_t {
        let src = &x[o * stride * channels..(o * stride + kernel) * channels];
        out[o * width..(o + 1) * width].copy_from_slice(src);
    }
    (out, out_t)
}

pub(crate) fn check_matmul(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => Err(Error::Dimension {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        }),
    }
}

pub(crate) fn check_layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<usize> {
    if x.rank() == 0 {
        return Err(Error::EmptyAxis { op: "layer_norm" });
    }
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    if !(eps >= 0.0) {
        return Err(Error::Precondition(format!("layer_norm eps must be >= 0, got {eps}")));
    }
    Ok(d)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = check_matmul(a, b)?;
    Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    match a.shape() {
        [m, n] => Tensor::new(vec![*n, *m], transpose_raw(a.data(), *m, *n)),
        s => Err(Error::Precondition(format!("transpose expects a matrix, got {s:?}"))),
    }
}

/// Normalizes over the last axis, then applies `gamma ⊙ x̂ + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = check_layer_norm(x, gamma, beta, eps)?;
    let out = layer_norm_raw(x.data(), d, gamma.data(), beta.data(), eps);
    Tensor::new(x.shape().to_vec(), out.y)
}

pub fn softmax(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    Tensor::new(x.shape().to_vec(), softmax_raw(x.data(), n)).expect("same shape")
}

pub fn log_softmax(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    Tensor::new(x.shape().to_vec(), log_softmax_raw(x.data(), n)).expect("same shape")
}

pub fn gelu(x: &Tensor) -> Tensor {
    map(x, gelu_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}
