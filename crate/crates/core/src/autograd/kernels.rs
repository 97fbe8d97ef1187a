//! Forward and backward kernels for each layer kind. Activations are NCHW
//! (flat activations are `[N, C]`, i.e. `H = W = 1`).

use crate::tensor::{gemm_into, Scalar};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Unfolds `x` into a `[c_in·k·k, n·ho·wo]` patch matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw_out = g.ho * g.wo;
    let ncols = g.cols();
    let mut cols = vec![T::zero(); g.patch() * ncols];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let src = &x[(n * g.c_in + c) * g.h * g.w..(n * g.c_in + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * hw_out..(n + 1) * hw_out];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                        let dst_o = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                        for (ow, d) in dst_o.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a patch-gradient matrix back onto the input gradient (accumulating).
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw_out = g.ho * g.wo;
    let ncols = g.cols();
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c_in + c) * g.h * g.w..(n * g.c_in + c + 1) * g.h * g.w];
                    let src = &src_row[n * hw_out..(n + 1) * hw_out];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst_row[iw as usize] += src[oh * g.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let cols = im2col(x, g);
    let ncols = g.cols();
    let mut out_mat = vec![T::zero(); g.c_out * ncols];
    gemm_into(weight, &cols, &mut out_mat, g.c_out, g.patch(), ncols, false, false, false);
    let hw = g.ho * g.wo;
    let mut y = vec![T::zero(); g.n * g.c_out * hw];
    for co in 0..g.c_out {
        let b = bias.map_or(T::zero(), |b| b[co]);
        for n in 0..g.n {
            let src = &out_mat[co * ncols + n * hw..co * ncols + (n + 1) * hw];
            let dst = &mut y[(n * g.c_out + co) * hw..(n * g.c_out + co + 1) * hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s + b;
            }
        }
    }
    y
}

pub struct ConvGrads<T> {
    pub dx: Vec<T>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    has_bias: bool,
    want_params: bool,
) -> ConvGrads<T> {
    let hw = g.ho * g.wo;
    let ncols = g.cols();
    // [c_out, n·hw]
    let mut dy_mat = vec![T::zero(); g.c_out * ncols];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let src = &dy[(n * g.c_out + co) * hw..(n * g.c_out + co + 1) * hw];
            dy_mat[co * ncols + n * hw..co * ncols + (n + 1) * hw].copy_from_slice(src);
        }
    }
    let (dw, db) = if want_params {
        let cols = im2col(x, g);
        let mut dw = vec![T::zero(); g.c_out * g.patch()];
        gemm_into(&dy_mat, &cols, &mut dw, g.c_out, ncols, g.patch(), false, true, false);
        let db = has_bias.then(|| {
            (0..g.c_out)
                .map(|co| dy_mat[co * ncols..(co + 1) * ncols].iter().copied().sum())
                .collect()
        });
        (Some(dw), db)
    } else {
        (None, None)
    };
    let mut dcols = vec![T::zero(); g.patch() * ncols];
    gemm_into(weight, &dy_mat, &mut dcols, g.patch(), g.c_out, ncols, true, false, false);
    let mut dx = vec![T::zero(); x.len()];
    col2im(&dcols, g, &mut dx);
    ConvGrads { dx, dw, db }
}

/// `y = x·Wᵀ + b` with `x: [n, in]`, `W: [out, in]`.
pub fn fc_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    n: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); n * d_out];
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(d_out) {
            row.copy_from_slice(b);
        }
    }
    gemm_into(x, weight, &mut y, n, d_in, d_out, false, true, bias.is_some());
    y
}

pub struct FcGrads<T> {
    pub dx: Vec<T>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn fc_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    n: usize,
    d_in: usize,
    d_out: usize,
    has_bias: bool,
    want_params: bool,
) -> FcGrads<T> {
    let mut dx = vec![T::zero(); n * d_in];
    gemm_into(dy, weight, &mut dx, n, d_out, d_in, false, false, false);
    let (dw, db) = if want_params {
        let mut dw = vec![T::zero(); d_out * d_in];
        gemm_into(dy, x, &mut dw, d_out, n, d_in, true, false, false);
        let db = has_bias.then(|| {
            let mut db = vec![T::zero(); d_out];
            for row in dy.chunks_exact(d_out) {
                for (a, b) in db.iter_mut().zip(row) {
                    *a += *b;
                }
            }
            db
        });
        (Some(dw), db)
    } else {
        (None, None)
    };
    FcGrads { dx, dw, db }
}

/// Cached per-channel quantities for the BN backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and unbiased variance (train mode only).
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

#[allow(clippy::too_many_arguments)]
pub fn bn_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    train: bool,
) -> (Vec<T>, BnCache<T>) {
    let eps = T::from_f64_lossy(BN_EPS);
    let m = n * hw;
    let (mean, var_biased, stats) = if train {
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                s += x[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum();
            }
            let mu = s / T::from_usize_lossy(m);
            let mut v = T::zero();
            for i in 0..n {
                for &val in &x[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    v += (val - mu) * (val - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = v / T::from_usize_lossy(m);
        }
        let unbiased = var
            .iter()
            .map(|&v| {
                if m > 1 {
                    v * T::from_usize_lossy(m) / T::from_usize_lossy(m - 1)
                } else {
                    v
                }
            })
            .collect();
        (mean.clone(), var, Some((mean, unbiased)))
    } else {
        (running_mean.to_vec(), running_var.to_vec(), None)
    };
    let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for ((yv, xh), &xv) in y[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&x[r]) {
                *xh = (xv - mean[ch]) * inv_std[ch];
                *yv = gamma[ch] * *xh + beta[ch];
            }
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_stats: stats,
        },
    )
}

pub struct BnGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub fn bn_backward<T: Scalar>(
    dy: &[T],
    cache: &BnCache<T>,
    gamma: &[T],
    n: usize,
    c: usize,
    hw: usize,
    train: bool,
) -> BnGrads<T> {
    let m = T::from_usize_lossy(n * hw);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for (&d, &xh) in dy[r.clone()].iter().zip(&cache.xhat[r]) {
                dgamma[ch] += d * xh;
                dbeta[ch] += d;
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for i in 0..n {
        for ch in 0..c {
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            let scale = gamma[ch] * cache.inv_std[ch];
            for ((dxv, &d), &xh) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&cache.xhat[r]) {
                *dxv = if train {
                    scale * (d - dbeta[ch] / m - xh * dgamma[ch] / m)
                } else {
                    scale * d
                };
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

pub fn maxpool_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    ho: usize,
    wo: usize,
) -> (Vec<T>, Vec<u32>) {
    let mut y = vec![T::zero(); n * c * ho * wo];
    let mut arg = vec![0u32; y.len()];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for ki in 0..k {
                    for kj in 0..k {
                        let idx = (oh * s + ki) * w + ow * s + kj;
                        if src[idx] > best {
                            best = src[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = plane * ho * wo + oh * wo + ow;
                y[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward<T: Scalar>(dy: &[T], arg: &[u32], planes: usize, hw_in: usize, hw_out: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * hw_in];
    for p in 0..planes {
        for o in 0..hw_out {
            dx[p * hw_in + arg[p * hw_out + o] as usize] += dy[p * hw_out + o];
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
pub fn avgpool_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let inv = T::one() / T::from_usize_lossy(k * k);
    let mut y = vec![T::zero(); n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = T::zero();
                for ki in 0..k {
                    for kj in 0..k {
                        acc += src[(oh * s + ki) * w + ow * s + kj];
                    }
                }
                y[plane * ho * wo + oh * wo + ow] = acc * inv;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn avgpool_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let inv = T::one() / T::from_usize_lossy(k * k);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oh in 0..ho {
            for ow in 0..wo {
                let g = dy[p * ho * wo + oh * wo + ow] * inv;
                for ki in 0..k {
                    for kj in 0..k {
                        dx[p * h * w + (oh * s + ki) * w + ow * s + kj] += g;
                    }
                }
            }
        }
    }
    dx
}
