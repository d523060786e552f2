//! Slice-level compute kernels shared by the graph ops and the standalone
//! attention routines.
//!
//! All reductions accumulate sequentially along the contracted axis in
//! ascending index order, so a schoolbook loop that starts from zero and adds
//! in the same order reproduces these results exactly.

use super::Scalar;
use crate::error::{Error, Result};

/// `c[m,n] = a[m,k] · b[k,n]`.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { wide::matmul_nn(a, b, m, k, n) };
    }
    matmul_nn_body(a, b, m, k, n)
}

#[inline(always)]
fn matmul_nn_body<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
    c
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, n, k);
    matmul_nn(a, &bt, m, k, n)
}

/// `c[m,n] = a[k,m]ᵀ · b[k,n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { wide::matmul_tn(a, b, k, m, n) };
    }
    matmul_tn_body(a, b, k, m, n)
}

#[inline(always)]
fn matmul_tn_body<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + api * bj;
            }
        }
    }
    c
}

/// The matmul bodies compiled for 256-bit lanes. FMA stays disabled, so each
/// element sees the same multiply-then-add sequence and results are bitwise
/// identical to the portable path.
#[cfg(target_arch = "x86_64")]
mod wide {
    use super::Scalar;

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
        super::matmul_nn_body(a, b, m, k, n)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
        super::matmul_tn_body(a, b, k, m, n)
    }
}

pub fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Output extent of a strided window over `n` positions with symmetric zero padding.
pub fn window_out_len(
    op: &'static str,
    n: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Config(format!("{op}: kernel and stride must be positive")));
    }
    let padded = n + 2 * pad;
    if padded < kernel {
        return Err(Error::EmptyOutput {
            op,
            extent: n,
            padded,
            kernel,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Input index hit by output `o`, tap `t`, or `None` inside the padding.
#[inline]
fn tap_index(o: usize, t: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
    let pos = o * stride + t;
    if pos < pad || pos - pad >= n {
        None
    } else {
        Some(pos - pad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub n_out: usize,
}

/// Cross-correlation `y[o,co] = Σ_t Σ_ci x[o·s+t-pad, ci] · w[t,ci,co]`.
pub fn conv1d_forward<T: Scalar>(x: &[T], w: &[T], g: &Conv1dGeom) -> Vec<T> {
    let mut y = vec![T::zero(); g.n_out * g.c_out];
    for o in 0..g.n_out {
        let yrow = &mut y[o * g.c_out..(o + 1) * g.c_out];
        for t in 0..g.kernel {
            let Some(i) = tap_index(o, t, g.stride, g.pad, g.n) else {
                continue;
            };
            for ci in 0..g.c_in {
                let xv = x[i * g.c_in + ci];
                let wrow = &w[(t * g.c_in + ci) * g.c_out..(t * g.c_in + ci + 1) * g.c_out];
                for (yv, &wv) in yrow.iter_mut().zip(wrow) {
                    *yv = *yv + xv * wv;
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw)` for [`conv1d_forward`].
pub fn conv1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &Conv1dGeom,
) -> (Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); g.n * g.c_in];
    let mut dw = vec![T::zero(); w.len()];
    for o in 0..g.n_out {
        let grow = &gy[o * g.c_out..(o + 1) * g.c_out];
        for t in 0..g.kernel {
            let Some(i) = tap_index(o, t, g.stride, g.pad, g.n) else {
                continue;
            };
            for ci in 0..g.c_in {
                let base = (t * g.c_in + ci) * g.c_out;
                let wrow = &w[base..base + g.c_out];
                let mut acc = T::zero();
                for (&gv, &wv) in grow.iter().zip(wrow) {
                    acc = acc + gv * wv;
                }
                dx[i * g.c_in + ci] = dx[i * g.c_in + ci] + acc;
                let xv = x[i * g.c_in + ci];
                for (dwv, &gv) in dw[base..base + g.c_out].iter_mut().zip(grow) {
                    *dwv = *dwv + xv * gv;
                }
            }
        }
    }
    (dx, dw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub h_out: usize,
    pub w_out: usize,
}

/// 2D cross-correlation over `[H, W, C_in]` with weights `[kh, kw, C_in, C_out]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], g: &Conv2dGeom) -> Vec<T> {
    let (kh, kw) = g.kernel;
    let mut y = vec![T::zero(); g.h_out * g.w_out * g.c_out];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let ybase = (oy * g.w_out + ox) * g.c_out;
            let yrow = &mut y[ybase..ybase + g.c_out];
            for ty in 0..kh {
                let Some(iy) = tap_index(oy, ty, g.stride.0, g.pad.0, g.h) else {
                    continue;
                };
                for tx in 0..kw {
                    let Some(ix) = tap_index(ox, tx, g.stride.1, g.pad.1, g.w) else {
                        continue;
                    };
                    let xbase = (iy * g.w + ix) * g.c_in;
                    for ci in 0..g.c_in {
                        let xv = x[xbase + ci];
                        let wbase = ((ty * kw + tx) * g.c_in + ci) * g.c_out;
                        for (yv, &wv) in yrow.iter_mut().zip(&w[wbase..wbase + g.c_out]) {
                            *yv = *yv + xv * wv;
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &Conv2dGeom,
) -> (Vec<T>, Vec<T>) {
    let (kh, kw) = g.kernel;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let gbase = (oy * g.w_out + ox) * g.c_out;
            let grow = &gy[gbase..gbase + g.c_out];
            for ty in 0..kh {
                let Some(iy) = tap_index(oy, ty, g.stride.0, g.pad.0, g.h) else {
                    continue;
                };
                for tx in 0..kw {
                    let Some(ix) = tap_index(ox, tx, g.stride.1, g.pad.1, g.w) else {
                        continue;
                    };
                    let xbase = (iy * g.w + ix) * g.c_in;
                    for ci in 0..g.c_in {
                        let wbase = ((ty * kw + tx) * g.c_in + ci) * g.c_out;
                        let mut acc = T::zero();
                        for (&gv, &wv) in grow.iter().zip(&w[wbase..wbase + g.c_out]) {
                            acc = acc + gv * wv;
                        }
                        dx[xbase + ci] = dx[xbase + ci] + acc;
                        let xv = x[xbase + ci];
                        for (dwv, &gv) in dw[wbase..wbase + g.c_out].iter_mut().zip(grow) {
                            *dwv = *dwv + xv * gv;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Mean over each window; padded positions count as zeros in the divisor.
pub fn avg_pool1d_forward<T: Scalar>(x: &[T], c: usize, g: &Conv1dGeom) -> Vec<T> {
    let inv = T::one() / T::cast_from(g.kernel as f64);
    let mut y = vec![T::zero(); g.n_out * c];
    for o in 0..g.n_out {
        let yrow = &mut y[o * c..(o + 1) * c];
        for t in 0..g.kernel {
            if let Some(i) = tap_index(o, t, g.stride, g.pad, g.n) {
                for (yv, &xv) in yrow.iter_mut().zip(&x[i * c..(i + 1) * c]) {
                    *yv = *yv + xv;
                }
            }
        }
        for yv in yrow.iter_mut() {
            *yv = *yv * inv;
        }
    }
    y
}

pub fn avg_pool1d_backward<T: Scalar>(gy: &[T], c: usize, g: &Conv1dGeom) -> Vec<T> {
    let inv = T::one() / T::cast_from(g.kernel as f64);
    let mut dx = vec![T::zero(); g.n * c];
    for o in 0..g.n_out {
        for t in 0..g.kernel {
            if let Some(i) = tap_index(o, t, g.stride, g.pad, g.n) {
                for ch in 0..c {
                    dx[i * c + ch] = dx[i * c + ch] + gy[o * c + ch] * inv;
                }
            }
        }
    }
    dx
}

pub fn avg_pool2d_forward<T: Scalar>(x: &[T], c: usize, g: &Conv2dGeom) -> Vec<T> {
    let (kh, kw) = g.kernel;
    let inv = T::one() / T::cast_from((kh * kw) as f64);
    let mut y = vec![T::zero(); g.h_out * g.w_out * c];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let ybase = (oy * g.w_out + ox) * c;
            for ty in 0..kh {
                let Some(iy) = tap_index(oy, ty, g.stride.0, g.pad.0, g.h) else {
                    continue;
                };
                for tx in 0..kw {
                    let Some(ix) = tap_index(ox, tx, g.stride.1, g.pad.1, g.w) else {
                        continue;
                    };
                    let xbase = (iy * g.w + ix) * c;
                    for ch in 0..c {
                        y[ybase + ch] = y[ybase + ch] + x[xbase + ch];
                    }
                }
            }
            for ch in 0..c {
                y[ybase + ch] = y[ybase + ch] * inv;
            }
        }
    }
    y
}

pub fn avg_pool2d_backward<T: Scalar>(gy: &[T], c: usize, g: &Conv2dGeom) -> Vec<T> {
    let (kh, kw) = g.kernel;
    let inv = T::one() / T::cast_from((kh * kw) as f64);
    let mut dx = vec![T::zero(); g.h * g.w * c];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let gbase = (oy * g.w_out + ox) * c;
            for ty in 0..kh {
                let Some(iy) = tap_index(oy, ty, g.stride.0, g.pad.0, g.h) else {
                    continue;
                };
                for tx in 0..kw {
                    let Some(ix) = tap_index(ox, tx, g.stride.1, g.pad.1, g.w) else {
                        continue;
                    };
                    let xbase = (iy * g.w + ix) * c;
                    for ch in 0..c {
                        dx[xbase + ch] = dx[xbase + ch] + gy[gbase + ch] * inv;
                    }
                }
            }
        }
    }
    dx
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &[T], m: usize, n: usize) -> Result<Vec<T>> {
    let mut y = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mut max = T::neg_infinity();
        for &v in row {
            if v.is_nan() {
                return Err(Error::NaN("softmax_rows"));
            }
            max = max.max(v);
        }
        let yrow = &mut y[i * n..(i + 1) * n];
        let mut sum = T::zero();
        for (yv, &v) in yrow.iter_mut().zip(row) {
            *yv = (v - max).exp();
            sum = sum + *yv;
        }
        let inv = T::one() / sum;
        for yv in yrow.iter_mut() {
            *yv = *yv * inv;
        }
    }
    Ok(y)
}

/// Normalizes each row to zero mean and unit variance.
/// Returns `(xhat, rstd)` with one reciprocal standard deviation per row.
pub fn normalize_rows<T: Scalar>(x: &[T], m: usize, n: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); m * n];
    let mut rstd = vec![T::zero(); m];
    let inv_n = 1.0 / n as f64;
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() * inv_n;
        let var = row
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            * inv_n;
        let r = 1.0 / (var + eps).sqrt();
        rstd[i] = T::cast_from(r);
        for (o, &v) in xhat[i * n..(i + 1) * n].iter_mut().zip(row) {
            *o = T::cast_from((v.as_f64() - mean) * r);
        }
    }
    (xhat, rstd)
}
