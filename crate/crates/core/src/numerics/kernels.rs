//! Raw slice kernels shared by the forward ops and their backward rules.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// `out[i] += a[i] @ b[i % b_batch]` for `a: [batch, m, k]`, `b: [b_batch, k, n]`.
pub(crate) fn matmul_acc(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    batch: usize,
    b_batch: usize,
    (m, k, n): (usize, usize, usize),
) {
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[(bi % b_batch) * k * n..(bi % b_batch + 1) * k * n];
        let out = &mut out[bi * m * n..(bi + 1) * m * n];
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
    }
}

/// Gradient of `a` for `out = a @ b`: `ga[i] += g[i] @ b[i % b_batch]^T`.
pub(crate) fn matmul_grad_a(
    g: &[f64],
    b: &[f64],
    ga: &mut [f64],
    batch: usize,
    b_batch: usize,
    (m, k, n): (usize, usize, usize),
) {
    for bi in 0..batch {
        let g = &g[bi * m * n..(bi + 1) * m * n];
        let b = &b[(bi % b_batch) * k * n..(bi % b_batch + 1) * k * n];
        let ga = &mut ga[bi * m * k..(bi + 1) * m * k];
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }
}

/// Gradient of `b` for `out = a @ b`: `gb[i % b_batch] += a[i]^T @ g[i]`.
pub(crate) fn matmul_grad_b(
    a: &[f64],
    g: &[f64],
    gb: &mut [f64],
    batch: usize,
    b_batch: usize,
    (m, k, n): (usize, usize, usize),
) {
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let g = &g[bi * m * n..(bi + 1) * m * n];
        let gb = &mut gb[(bi % b_batch) * k * n..(bi % b_batch + 1) * k * n];
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let gbrow = &mut gb[p * n..(p + 1) * n];
                for (o, gv) in gbrow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }
}

/// Permutes `data` of `shape` so that output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut index = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for axis in (0..out_shape.len()).rev() {
            index[axis] += 1;
            offset += src_strides[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            offset -= src_strides[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
    out
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Softmax over contiguous rows of length `n`. Rows whose entries are all
/// `-inf` map to all zeros.
pub(crate) fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        orow.iter_mut().for_each(|o| *o /= total);
    }
    out
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Standard normal CDF.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}
