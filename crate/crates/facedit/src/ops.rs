//! Deterministic numeric kernels.
//!
//! All reductions accumulate in f64 with a fixed iteration order, so every
//! operation is bit-reproducible across runs and platforms. The kernels are
//! generic over the element type: the public API works on `f32` tensors,
//! while the internal gradient graph reuses the same code at `f64`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

// ---------------------------------------------------------------------------
// Generic kernels
// ---------------------------------------------------------------------------

/// C[m×n] = A[m×k] · B[k×n]. Row-major, i-k-j loop order, f64 row accumulator.
pub(crate) fn matmul_kernel<S: Scalar>(
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [S],
) {
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let aik = aik.to_f64();
            let brow = &b[kk * n..(kk + 1) * n];
            for (j, &bkj) in brow.iter().enumerate() {
                acc[j] += aik * bkj.to_f64();
            }
        }
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] = S::from_f64(acc[j]);
        }
    }
}

/// C[m×n] = A[m×k] · B[n×k]ᵀ.
pub(crate) fn matmul_nt_kernel<S: Scalar>(
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [S],
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for kk in 0..k {
                acc += arow[kk].to_f64() * brow[kk].to_f64();
            }
            out[i * n + j] = S::from_f64(acc);
        }
    }
}

/// Row-wise softmax with max subtraction; sums accumulate in f64.
pub(crate) fn softmax_rows_kernel<S: Scalar>(x: &[S], rows: usize, cols: usize, out: &mut [S]) {
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mut mx = f64::NEG_INFINITY;
        for &v in row {
            mx = mx.max(v.to_f64());
        }
        let mut sum = 0.0f64;
        let orow = &mut out[i * cols..(i + 1) * cols];
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v.to_f64() - mx).exp();
            *o = S::from_f64(e);
            sum += e;
        }
        for o in orow.iter_mut() {
            *o = S::from_f64(o.to_f64() / sum);
        }
    }
}

/// Per-row standardization: (x - mean) / sqrt(var + eps), population variance,
/// no learned affine.
pub(crate) fn layer_norm_kernel<S: Scalar>(
    x: &[S],
    rows: usize,
    cols: usize,
    eps: f64,
    out: &mut [S],
) {
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mut mean = 0.0f64;
        for &v in row {
            mean += v.to_f64();
        }
        mean /= cols as f64;
        let mut var = 0.0f64;
        for &v in row {
            let d = v.to_f64() - mean;
            var += d * d;
        }
        var /= cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let orow = &mut out[i * cols..(i + 1) * cols];
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = S::from_f64((v.to_f64() - mean) * inv);
        }
    }
}

/// Smooth gaussian-style gate: x * 0.5 * (1 + tanh(√(2/π)(x + 0.044715 x³))).
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of `gelu_scalar` (exact for the tanh form).
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn dot_f64<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += x.to_f64() * y.to_f64();
    }
    acc
}

// ---------------------------------------------------------------------------
// Public f32 operations
// ---------------------------------------------------------------------------

/// Matrix product with deterministic accumulation order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::Shape(format!(
            "matmul inner dims disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    matmul_kernel(a.data(), b.data(), m, k, n, out.data_mut());
    Ok(out)
}

/// Row-wise softmax, stable for large-magnitude logits.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(x.shape());
    softmax_rows_kernel(x.data(), r, c, out.data_mut());
    out
}

/// Per-token standardization without learned affine. Affine behavior belongs
/// to the modulation factors that consume this.
pub fn layer_norm(x: &Tensor, eps: f32) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(x.shape());
    layer_norm_kernel(x.data(), r, c, eps as f64, out.data_mut());
    out
}

/// Cosine similarity of two equal-length vectors (any shape, flattened).
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine over different lengths: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    let c = dot_f64(a.data(), b.data()) / (na * nb);
    Ok(c.clamp(-1.0, 1.0) as f32)
}

/// Central-difference gradient of a scalar field, one coordinate at a time.
///
/// `f` must be pure; coordinates are probed independently (and in parallel).
/// The divisor uses the realized f32 perturbation, not the nominal `h`, so
/// storage quantization of the probe point does not bias the estimate.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64> + Sync,
{
    use rayon::prelude::*;
    if h <= 0.0 {
        return Err(Error::Contract(format!("finite difference step h={h}")));
    }
    let grads: Vec<Result<f32>> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let base = x.data()[i] as f64;
            let up = (base + h) as f32;
            let dn = (base - h) as f32;
            let mut xp = x.clone();
            xp.data_mut()[i] = up;
            let fp = f(&xp)?;
            xp.data_mut()[i] = dn;
            let fm = f(&xp)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite probe at coordinate {i}: f+={fp}, f-={fm}"
                )));
            }
            let eff = up as f64 - dn as f64;
            Ok(((fp - fm) / eff) as f32)
        })
        .collect();
    let mut data = Vec::with_capacity(x.len());
    for g in grads {
        data.push(g?);
    }
    Tensor::from_vec(x.shape(), data)
}

/// Relative L2 error between two gradients of the same shape.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let mut diff = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = *x as f64 - *y as f64;
        diff += d * d;
    }
    let denom = a.norm().max(b.norm()).max(1e-12);
    diff.sqrt() / denom
}
