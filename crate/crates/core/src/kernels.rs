//! Slice-level numeric kernels shared by the autodiff graph and the cached
//! inference path. All loops run in a fixed order so results are bitwise
//! reproducible.

use crate::flops;

/// `c = a·b` (or `c += a·b` when `accumulate`) for strided operands, through
/// a packed SIMD GEMM. Each output element is reduced over `k` in the same
/// order whatever `m` and `n` are, so single-row and batched calls agree.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (isize, isize), b: &[f64], b_strides: (isize, isize), c: &mut [f64], accumulate: bool) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every stride pattern below addresses only elements inside the
    // slices, whose lengths the callers assert.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    flops::record(m * k * n);
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), &mut c, false);
    c
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), &mut c, false);
    c
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    assert_eq!(out.len(), k * n);
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    gemm(k, m, n, a, (1, k as isize), b, (n as isize, 1), out, true);
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// d/dx of exact GELU: Φ(x) + x·φ(x).
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// In-place max-subtracted softmax of one row.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Per-row layer norm. Returns `(y, xhat, inv_std)`.
pub fn layer_norm(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv[r] = is;
        let hr = &mut xhat[r * d..(r + 1) * d];
        let yr = &mut y[r * d..(r + 1) * d];
        for j in 0..d {
            hr[j] = (xr[j] - mean) * is;
            yr[j] = hr[j] * gain[j] + bias[j];
        }
    }
    (y, xhat, inv)
}

/// Rotary angle table entry for position `pos`, pair index `i` of a head of
/// width `head_dim`.
#[inline]
pub fn rope_angle(pos: usize, i: usize, head_dim: usize, base: f64) -> f64 {
    let inv_freq = base.powf(-2.0 * i as f64 / head_dim as f64);
    pos as f64 * inv_freq
}

/// Rotates one row `[heads × head_dim]` in place (split-half pairing).
/// `sign = -1.0` applies the inverse rotation.
pub fn rope_row(row: &mut [f64], pos: usize, heads: usize, base: f64, sign: f64) {
    let head_dim = row.len() / heads;
    let half = head_dim / 2;
    for h in 0..heads {
        let hr = &mut row[h * head_dim..(h + 1) * head_dim];
        for i in 0..half {
            let (s, c) = (sign * rope_angle(pos, i, head_dim, base)).sin_cos();
            let a = hr[i];
            let b = hr[i + half];
            hr[i] = a * c - b * s;
            hr[i + half] = a * s + b * c;
        }
    }
}

/// Causal attention of one query row against `keys`/`values` rows
/// `0..=last`. Writes the mixed values into `out` and the attention
/// probabilities into `probs` (length `heads × (last + 1)`).
#[allow(clippy::too_many_arguments)]
pub fn attend_row(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    d: usize,
    heads: usize,
    last: usize,
    out: &mut [f64],
    probs: &mut [f64],
) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let n = last + 1;
    flops::record(2 * d * n);
    for h in 0..heads {
        let qh = &q[h * hd..(h + 1) * hd];
        let p = &mut probs[h * n..(h + 1) * n];
        for (j, pj) in p.iter_mut().enumerate() {
            let kj = &keys[j * d + h * hd..j * d + (h + 1) * hd];
            *pj = dot(qh, kj) * scale;
        }
        softmax_row(p);
        let oh = &mut out[h * hd..(h + 1) * hd];
        oh.iter_mut().for_each(|v| *v = 0.0);
        for (j, &pj) in p.iter().enumerate() {
            let vj = &values[j * d + h * hd..j * d + (h + 1) * hd];
            for (o, &v) in oh.iter_mut().zip(vj) {
                *o += pj * v;
            }
        }
    }
}
