//! Slice-level forward and backward kernels. Matrices are row-major; callers
//! pass dimensions explicitly. Every loop has a fixed evaluation order.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{axpy, dot, exp, normal_cdf, normal_pdf, sqrt};

/// `out[T×B] += x[T×A] · w[A×B]`
pub fn matmul_acc(x: &[f64], t: usize, a: usize, w: &[f64], b: usize, out: &mut [f64]) {
    for r in 0..t {
        let xr = &x[r * a..(r + 1) * a];
        let or = &mut out[r * b..(r + 1) * b];
        for (k, &xv) in xr.iter().enumerate() {
            if xv != 0.0 {
                axpy(xv, &w[k * b..(k + 1) * b], or);
            }
        }
    }
}

/// `a[T×d] · b[S×d]ᵀ → [T×S]`
pub fn matmul_nt(a: &[f64], t: usize, d: usize, b: &[f64], s: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * s];
    for i in 0..t {
        let ar = &a[i * d..(i + 1) * d];
        for j in 0..s {
            out[i * s + j] = dot(ar, &b[j * d..(j + 1) * d]);
        }
    }
    out
}

/// `out[A×B] += x[T×A]ᵀ · y[T×B]`
pub fn matmul_tn_acc(x: &[f64], t: usize, a: usize, y: &[f64], b: usize, out: &mut [f64]) {
    for r in 0..t {
        let yr = &y[r * b..(r + 1) * b];
        for k in 0..a {
            let xv = x[r * a + k];
            if xv != 0.0 {
                axpy(xv, yr, &mut out[k * b..(k + 1) * b]);
            }
        }
    }
}

pub fn linear_forward(x: &[f64], t: usize, a: usize, w: &[f64], b: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = match bias {
        Some(bias) => {
            let mut o = Vec::with_capacity(t * b);
            for _ in 0..t {
                o.extend_from_slice(bias);
            }
            o
        }
        None => vec![0.0; t * b],
    };
    matmul_acc(x, t, a, w, b, &mut out);
    out
}

pub fn column_sums_acc(dy: &[f64], t: usize, b: usize, out: &mut [f64]) {
    for r in 0..t {
        for (o, v) in out.iter_mut().zip(&dy[r * b..(r + 1) * b]) {
            *o += v;
        }
    }
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Per-row layer normalization with population variance. Returns the output,
/// the normalized rows, and the per-row reciprocal standard deviation.
pub fn layer_norm_forward(
    x: &[f64],
    rows: usize,
    cols: usize,
    gain: &[f64],
    shift: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; rows * cols];
    let mut xhat = vec![0.0; rows * cols];
    let mut rstd = vec![0.0; rows];
    let n = cols as f64;
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / n;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rs = 1.0 / sqrt(var + eps);
        rstd[r] = rs;
        for c in 0..cols {
            let h = (xr[c] - mean) * rs;
            xhat[r * cols + c] = h;
            y[r * cols + c] = h * gain[c] + shift[c];
        }
    }
    (y, xhat, rstd)
}

/// Returns `dx` and accumulates into `dgain`/`dshift` when given.
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    rows: usize,
    cols: usize,
    gain: &[f64],
    mut dgain: Option<&mut [f64]>,
    mut dshift: Option<&mut [f64]>,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * cols];
    let n = cols as f64;
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let dyr = &dy[r * cols..(r + 1) * cols];
        let xr = &xhat[r * cols..(r + 1) * cols];
        if let Some(dg) = dgain.as_deref_mut() {
            for c in 0..cols {
                dg[c] += dyr[c] * xr[c];
            }
        }
        if let Some(ds) = dshift.as_deref_mut() {
            for c in 0..cols {
                ds[c] += dyr[c];
            }
        }
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for c in 0..cols {
            dxhat[c] = dyr[c] * gain[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xr[c];
        }
        mean_d /= n;
        mean_dx /= n;
        for c in 0..cols {
            dx[r * cols + c] = rstd[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
        }
    }
    dx
}

pub fn softmax_rows_inplace(x: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = exp(*v - m);
            s += *v;
        }
        let inv = 1.0 / s;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Given softmax output `p` and upstream `dp`, returns the gradient w.r.t.
/// the softmax input.
pub fn softmax_rows_backward(p: &[f64], dp: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        let pr = &p[r * cols..(r + 1) * cols];
        let dr = &dp[r * cols..(r + 1) * cols];
        let s = dot(pr, dr);
        for c in 0..cols {
            dx[r * cols + c] = pr[c] * (dr[c] - s);
        }
    }
    dx
}

fn head_slice(qkv: &[f64], t: usize, width: usize, offset: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * dh);
    for r in 0..t {
        out.extend_from_slice(&qkv[r * width + offset..r * width + offset + dh]);
    }
    out
}

/// Multi-head scaled dot-product self-attention over a packed `[T × 3C]`
/// query/key/value grid. Returns the `[T × C]` output and the attention
/// probabilities `[H × T × T]`.
pub fn attention_forward(qkv: &[f64], t: usize, c: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = c / heads;
    let width = 3 * c;
    let scale = 1.0 / sqrt(dh as f64);
    let mut out = vec![0.0; t * c];
    let mut probs = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        let q = head_slice(qkv, t, width, h * dh, dh);
        let k = head_slice(qkv, t, width, c + h * dh, dh);
        let v = head_slice(qkv, t, width, 2 * c + h * dh, dh);
        let mut s = matmul_nt(&q, t, dh, &k, t);
        for x in s.iter_mut() {
            *x *= scale;
        }
        softmax_rows_inplace(&mut s, t, t);
        let mut o = vec![0.0; t * dh];
        matmul_acc(&s, t, t, &v, dh, &mut o);
        for r in 0..t {
            out[r * c + h * dh..r * c + (h + 1) * dh].copy_from_slice(&o[r * dh..(r + 1) * dh]);
        }
        probs.extend_from_slice(&s);
    }
    (out, probs)
}

pub fn attention_backward(qkv: &[f64], probs: &[f64], dout: &[f64], t: usize, c: usize, heads: usize) -> Vec<f64> {
    let dh = c / heads;
    let width = 3 * c;
    let scale = 1.0 / sqrt(dh as f64);
    let mut dqkv = vec![0.0; t * width];
    for h in 0..heads {
        let q = head_slice(qkv, t, width, h * dh, dh);
        let k = head_slice(qkv, t, width, c + h * dh, dh);
        let v = head_slice(qkv, t, width, 2 * c + h * dh, dh);
        let d_o = head_slice(dout, t, c, h * dh, dh);
        let p = &probs[h * t * t..(h + 1) * t * t];
        let dp = matmul_nt(&d_o, t, dh, &v, t);
        let mut dv = vec![0.0; t * dh];
        matmul_tn_acc(p, t, t, &d_o, dh, &mut dv);
        let mut ds = softmax_rows_backward(p, &dp, t, t);
        for x in ds.iter_mut() {
            *x *= scale;
        }
        let mut dq = vec![0.0; t * dh];
        matmul_acc(&ds, t, t, &k, dh, &mut dq);
        let mut dk = vec![0.0; t * dh];
        matmul_tn_acc(&ds, t, t, &q, dh, &mut dk);
        for r in 0..t {
            let base = r * width;
            dqkv[base + h * dh..base + (h + 1) * dh].copy_from_slice(&dq[r * dh..(r + 1) * dh]);
            dqkv[base + c + h * dh..base + c + (h + 1) * dh].copy_from_slice(&dk[r * dh..(r + 1) * dh]);
            dqkv[base + 2 * c + h * dh..base + 2 * c + (h + 1) * dh].copy_from_slice(&dv[r * dh..(r + 1) * dh]);
        }
    }
    dqkv
}

/// Same-padded 1-D cross-correlation. `x` is `[Cin × T]`, `k` is
/// `[Cout × Cin × K]` with odd `K`; output is `[Cout × T]`.
pub fn conv1d_forward(
    x: &[f64],
    cin: usize,
    t: usize,
    k: &[f64],
    cout: usize,
    ksize: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let pad = (ksize - 1) / 2;
    let mut y = vec![0.0; cout * t];
    for o in 0..cout {
        let yo = &mut y[o * t..(o + 1) * t];
        if let Some(b) = bias {
            yo.iter_mut().for_each(|v| *v = b[o]);
        }
        for i in 0..cin {
            let xi = &x[i * t..(i + 1) * t];
            for j in 0..ksize {
                let w = k[(o * cin + i) * ksize + j];
                if w == 0.0 {
                    continue;
                }
                let (ys, xs, n) = conv_span(j, pad, t);
                if n > 0 {
                    axpy(w, &xi[xs..xs + n], &mut yo[ys..ys + n]);
                }
            }
        }
    }
    y
}

/// Output start, input start, and length of the valid span for tap `j`.
#[inline]
fn conv_span(j: usize, pad: usize, t: usize) -> (usize, usize, usize) {
    if j >= pad {
        let shift = j - pad;
        (0, shift, t.saturating_sub(shift))
    } else {
        let shift = pad - j;
        (shift, 0, t.saturating_sub(shift))
    }
}

pub fn conv1d_backward(
    x: &[f64],
    cin: usize,
    t: usize,
    k: &[f64],
    cout: usize,
    ksize: usize,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let pad = (ksize - 1) / 2;
    if let Some(db) = dbias {
        for o in 0..cout {
            db[o] += dy[o * t..(o + 1) * t].iter().sum::<f64>();
        }
    }
    if let Some(dk) = dk {
        for o in 0..cout {
            let dyo = &dy[o * t..(o + 1) * t];
            for i in 0..cin {
                let xi = &x[i * t..(i + 1) * t];
                for j in 0..ksize {
                    let (ys, xs, n) = conv_span(j, pad, t);
                    if n > 0 {
                        dk[(o * cin + i) * ksize + j] += dot(&dyo[ys..ys + n], &xi[xs..xs + n]);
                    }
                }
            }
        }
    }
    if let Some(dx) = dx {
        for o in 0..cout {
            let dyo = &dy[o * t..(o + 1) * t];
            for i in 0..cin {
                let dxi = &mut dx[i * t..(i + 1) * t];
                for j in 0..ksize {
                    let w = k[(o * cin + i) * ksize + j];
                    if w == 0.0 {
                        continue;
                    }
                    let (ys, xs, n) = conv_span(j, pad, t);
                    if n > 0 {
                        axpy(w, &dyo[ys..ys + n], &mut dxi[xs..xs + n]);
                    }
                }
            }
        }
    }
}

/// Smallest standard deviation reported by [`mean_std_pool_forward`]; the
/// floor enters as `sqrt(var + floor²)` so the gradient stays finite.
pub const STD_FLOOR: f64 = 1e-8;

/// `[C × T] → [2C]`: per-channel time mean followed by per-channel population
/// standard deviation.
pub fn mean_std_pool_forward(x: &[f64], c: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * c];
    let n = t as f64;
    for ch in 0..c {
        let row = &x[ch * t..(ch + 1) * t];
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        out[ch] = mean;
        out[c + ch] = sqrt(var + STD_FLOOR * STD_FLOOR);
    }
    out
}

pub fn mean_std_pool_backward(x: &[f64], out: &[f64], dout: &[f64], c: usize, t: usize) -> Vec<f64> {
    let mut dx = vec![0.0; c * t];
    let n = t as f64;
    for ch in 0..c {
        let row = &x[ch * t..(ch + 1) * t];
        let mean = out[ch];
        let std = out[c + ch];
        let dm = dout[ch] / n;
        let ds = dout[c + ch] / (n * std);
        for (d, v) in dx[ch * t..(ch + 1) * t].iter_mut().zip(row) {
            *d = dm + ds * (v - mean);
        }
    }
    dx
}
