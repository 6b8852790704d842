//! Raw loops behind the tape ops. All reductions run in a fixed index order
//! so repeated runs are bit-identical.

use alloc::vec;
use alloc::vec::Vec;

use libm::sqrt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Output columns `ox` for which `ox * stride + kx - pad` lands inside `[0, w)`.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride as i64;
        let off = kx as i64 - self.pad as i64;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = ((self.w as i64 - off + s - 1) / s).clamp(0, self.w_out as i64);
        (lo.max(0) as usize, hi.max(lo) as usize)
    }

    #[inline]
    fn src_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// Unfolds one image `[c_in, h, w]` into `[c_in * kh * kw, h_out * w_out]`.
fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    for ci in 0..g.c_in {
        let xc = &x[ci * plane_in..][..plane_in];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[((ci * g.kh + ky) * g.kw + kx) * plane_out..][..plane_out];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.h_out {
                    let dst = &mut row[oy * g.w_out..][..g.w_out];
                    let Some(iy) = g.src_row(oy, ky) else {
                        dst.fill(0.0);
                        continue;
                    };
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let src = &xc[iy * g.w..][..g.w];
                    for ox in lo..hi {
                        dst[ox] = src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the image gradient.
fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    for ci in 0..g.c_in {
        let dc = &mut dx[ci * plane_in..][..plane_in];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[((ci * g.kh + ky) * g.kw + kx) * plane_out..][..plane_out];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.h_out {
                    let Some(iy) = g.src_row(oy, ky) else { continue };
                    let src = &row[oy * g.w_out..][..g.w_out];
                    let dst = &mut dc[iy * g.w..][..g.w];
                    for ox in lo..hi {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    let depth = g.c_in * g.kh * g.kw;
    let mut out = vec![0.0; g.batch * g.c_out * plane_out];
    let mut col = vec![0.0; depth * plane_out];
    for b in 0..g.batch {
        im2col(g, &input[b * g.c_in * plane_in..][..g.c_in * plane_in], &mut col);
        for co in 0..g.c_out {
            let o = &mut out[(b * g.c_out + co) * plane_out..][..plane_out];
            o.fill(bias[co]);
            let wrow = &weight[co * depth..][..depth];
            for (&wv, crow) in wrow.iter().zip(col.chunks_exact(plane_out)) {
                for (dst, src) in o.iter_mut().zip(crow) {
                    *dst += wv * src;
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`; `d_input` is skipped when not needed.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    let depth = g.c_in * g.kh * g.kw;
    let mut d_in = need_input.then(|| vec![0.0; input.len()]);
    let mut d_w = vec![0.0; weight.len()];
    let mut d_b = vec![0.0; g.c_out];
    let mut col = vec![0.0; depth * plane_out];
    let mut d_col = vec![0.0; if need_input { depth * plane_out } else { 0 }];
    for b in 0..g.batch {
        im2col(g, &input[b * g.c_in * plane_in..][..g.c_in * plane_in], &mut col);
        let d_out_b = &d_out[b * g.c_out * plane_out..][..g.c_out * plane_out];
        for (co, go) in d_out_b.chunks_exact(plane_out).enumerate() {
            d_b[co] += go.iter().sum::<f64>();
            let dwrow = &mut d_w[co * depth..][..depth];
            for (k, crow) in col.chunks_exact(plane_out).enumerate() {
                dwrow[k] += crow.iter().zip(go).map(|(x, g)| x * g).sum::<f64>();
            }
        }
        if let Some(d_in) = d_in.as_mut() {
            for (k, drow) in d_col.chunks_exact_mut(plane_out).enumerate() {
                for (co, go) in d_out_b.chunks_exact(plane_out).enumerate() {
                    let wv = weight[co * depth + k];
                    if co == 0 {
                        drow.iter_mut().zip(go).for_each(|(dst, gv)| *dst = wv * gv);
                    } else {
                        drow.iter_mut().zip(go).for_each(|(dst, gv)| *dst += wv * gv);
                    }
                }
            }
            col2im(g, &d_col, &mut d_in[b * g.c_in * plane_in..][..g.c_in * plane_in]);
        }
    }
    (d_in, d_w, d_b)
}

/// Per-channel statistics over `(batch, h, w)`; returns `(mean, biased variance)`.
pub(crate) fn channel_moments(x: &[f64], batch: usize, channels: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (batch * plane) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            s += x[(b * channels + c) * plane..][..plane].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..batch {
            v += x[(b * channels + c) * plane..][..plane].iter().map(|&xi| (xi - m) * (xi - m)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = v / count;
    }
    (mean, var)
}

/// Normalizes with the given statistics; returns `(xhat, inv_std)`.
pub(crate) fn normalize(
    x: &[f64],
    batch: usize,
    channels: usize,
    plane: usize,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / sqrt(v + eps)).collect();
    let mut xhat = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * plane;
            for (dst, &src) in xhat[off..off + plane].iter_mut().zip(&x[off..off + plane]) {
                *dst = (src - mean[c]) * inv_std[c];
            }
        }
    }
    (xhat, inv_std)
}
