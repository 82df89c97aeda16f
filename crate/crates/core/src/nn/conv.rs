//! 2-D convolution kernels (cross-correlation, NCHW, square kernels).
//!
//! The batch is unfolded into a `(ci*k*k, n*ho*wo)` column matrix so the
//! inner loops run over whole batches of output positions. The direct
//! loops are kept as a test oracle.

use crate::real::Real;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(n: usize, ci: usize, h: usize, w: usize, co: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self { n, ci, h, w, co, k, stride, pad, ho, wo })
    }
}

/// Output indices `lo..hi` whose input index `o*stride + kk - pad` is in `0..len`.
#[inline]
fn valid(kk: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > kk { (pad - kk + stride - 1) / stride } else { 0 };
    let hi = if len + pad > kk { ((len - 1 + pad - kk) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

/// Dot product with eight partial sums so the loop vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&p, &q)| s + p * q);
    for (pa, pb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += pa[l] * pb[l];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// Column matrix: row `(i*k + ky)*k + kx`, column `b*ho*wo + oy*wo + ox`.
fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let (ip, op) = (g.h * g.w, g.ho * g.wo);
    let cols_n = g.n * op;
    let mut cols = vec![T::zero(); g.ci * g.k * g.k * cols_n];
    for i in 0..g.ci {
        for ky in 0..g.k {
            let (y0, y1) = valid(ky, g.pad, g.stride, g.h, g.ho);
            for kx in 0..g.k {
                let (x0, x1) = valid(kx, g.pad, g.stride, g.w, g.wo);
                let row = &mut cols[((i * g.k + ky) * g.k + kx) * cols_n..][..cols_n];
                for b in 0..g.n {
                    let src = &x[(b * g.ci + i) * ip..][..ip];
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let dst = &mut row[b * op + oy * g.wo..][..g.wo];
                        for ox in x0..x1 {
                            dst[ox] = src[iy * g.w + ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn forward<T: Real>(g: &ConvGeom, x: &[T], wt: &[T], bias: Option<&[T]>) -> Vec<T> {
    let op = g.ho * g.wo;
    let cols_n = g.n * op;
    let kk = g.ci * g.k * g.k;
    let cols = im2col(g, x);
    let mut acc = vec![T::zero(); g.co * cols_n];
    for o in 0..g.co {
        let dst = &mut acc[o * cols_n..][..cols_n];
        if let Some(bs) = bias {
            dst.iter_mut().for_each(|v| *v = bs[o]);
        }
        for r in 0..kk {
            let wv = wt[o * kk + r];
            for (d, &c) in dst.iter_mut().zip(&cols[r * cols_n..][..cols_n]) {
                *d += wv * c;
            }
        }
    }
    let mut out = vec![T::zero(); g.n * g.co * op];
    for o in 0..g.co {
        for b in 0..g.n {
            out[(b * g.co + o) * op..][..op].copy_from_slice(&acc[o * cols_n + b * op..][..op]);
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)` for upstream gradient `gout`.
pub(crate) fn backward<T: Real>(g: &ConvGeom, x: &[T], wt: &[T], gout: &[T], need_x: bool, need_w: bool) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ip, op) = (g.h * g.w, g.ho * g.wo);
    let cols_n = g.n * op;
    let kk = g.ci * g.k * g.k;
    // Upstream gradient regrouped as (co, n*op).
    let mut go = vec![T::zero(); g.co * cols_n];
    let mut gb = vec![T::zero(); g.co];
    for o in 0..g.co {
        for b in 0..g.n {
            let src = &gout[(b * g.co + o) * op..][..op];
            go[o * cols_n + b * op..][..op].copy_from_slice(src);
            gb[o] += src.iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    let mut gw = Vec::new();
    if need_w {
        let cols = im2col(g, x);
        gw = vec![T::zero(); wt.len()];
        for o in 0..g.co {
            let gr = &go[o * cols_n..][..cols_n];
            for r in 0..kk {
                gw[o * kk + r] = dot(gr, &cols[r * cols_n..][..cols_n]);
            }
        }
    }
    let mut gx = Vec::new();
    if need_x {
        let mut gcols = vec![T::zero(); kk * cols_n];
        for r in 0..kk {
            let dst = &mut gcols[r * cols_n..][..cols_n];
            for o in 0..g.co {
                let wv = wt[o * kk + r];
                for (d, &v) in dst.iter_mut().zip(&go[o * cols_n..][..cols_n]) {
                    *d += wv * v;
                }
            }
        }
        gx = vec![T::zero(); x.len()];
        for i in 0..g.ci {
            for ky in 0..g.k {
                let (y0, y1) = valid(ky, g.pad, g.stride, g.h, g.ho);
                for kx in 0..g.k {
                    let (x0, x1) = valid(kx, g.pad, g.stride, g.w, g.wo);
                    let row = &gcols[((i * g.k + ky) * g.k + kx) * cols_n..][..cols_n];
                    for b in 0..g.n {
                        let dst = &mut gx[(b * g.ci + i) * ip..][..ip];
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let src = &row[b * op + oy * g.wo..][..g.wo];
                            for ox in x0..x1 {
                                dst[iy * g.w + ox * g.stride + kx - g.pad] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
fn forward_direct<T: Real>(g: &ConvGeom, x: &[T], wt: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (ip, op) = (g.h * g.w, g.ho * g.wo);
    let mut out = vec![T::zero(); g.n * g.co * op];
    for b in 0..g.n {
        for o in 0..g.co {
            let dst = &mut out[(b * g.co + o) * op..(b * g.co + o + 1) * op];
            if let Some(bs) = bias {
                dst.iter_mut().for_each(|v| *v = bs[o]);
            }
            for i in 0..g.ci {
                let src = &x[(b * g.ci + i) * ip..(b * g.ci + i + 1) * ip];
                for ky in 0..g.k {
                    let (y0, y1) = valid(ky, g.pad, g.stride, g.h, g.ho);
                    for kx in 0..g.k {
                        let (x0, x1) = valid(kx, g.pad, g.stride, g.w, g.wo);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = wt[((o * g.ci + i) * g.k + ky) * g.k + kx];
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row_out = &mut dst[oy * g.wo + x0..oy * g.wo + x1];
                            if g.stride == 1 {
                                let s0 = iy * g.w + x0 + kx - g.pad;
                                let row_in = &src[s0..s0 + (x1 - x0)];
                                for (d, &s) in row_out.iter_mut().zip(row_in) {
                                    *d += wv * s;
                                }
                            } else {
                                let base = iy * g.w + x0 * g.stride + kx - g.pad;
                                for (j, d) in row_out.iter_mut().enumerate() {
                                    *d += wv * src[base + j * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)` for upstream gradient `gout`.
#[cfg(test)]
fn backward_direct<T: Real>(g: &ConvGeom, x: &[T], wt: &[T], gout: &[T], need_x: bool, need_w: bool) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ip, op) = (g.h * g.w, g.ho * g.wo);
    let mut gx = if need_x { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut gw = if need_w { vec![T::zero(); wt.len()] } else { Vec::new() };
    let mut gb = vec![T::zero(); g.co];
    for b in 0..g.n {
        for o in 0..g.co {
            let go = &gout[(b * g.co + o) * op..(b * g.co + o + 1) * op];
            gb[o] += go.iter().fold(T::zero(), |a, &v| a + v);
            for i in 0..g.ci {
                let xoff = (b * g.ci + i) * ip;
                let src = &x[xoff..xoff + ip];
                for ky in 0..g.k {
                    let (y0, y1) = valid(ky, g.pad, g.stride, g.h, g.ho);
                    for kx in 0..g.k {
                        let (x0, x1) = valid(kx, g.pad, g.stride, g.w, g.wo);
                        if x0 >= x1 {
                            continue;
                        }
                        let widx = ((o * g.ci + i) * g.k + ky) * g.k + kx;
                        let wv = wt[widx];
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &go[oy * g.wo + x0..oy * g.wo + x1];
                            if g.stride == 1 {
                                let s0 = iy * g.w + x0 + kx - g.pad;
                                if need_w {
                                    for (&gv, &s) in grow.iter().zip(&src[s0..s0 + (x1 - x0)]) {
                                        acc += gv * s;
                                    }
                                }
                                if need_x {
                                    let dst = &mut gx[xoff + s0..xoff + s0 + (x1 - x0)];
                                    for (d, &gv) in dst.iter_mut().zip(grow) {
                                        *d += wv * gv;
                                    }
                                }
                            } else {
                                let base = iy * g.w + x0 * g.stride + kx - g.pad;
                                for (j, &gv) in grow.iter().enumerate() {
                                    let si = base + j * g.stride;
                                    if need_w {
                                        acc += gv * src[si];
                                    }
                                    if need_x {
                                        gx[xoff + si] += wv * gv;
                                    }
                                }
                            }
                        }
                        if need_w {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn unfolded_matches_direct() {
        let mut rng = Rng::new(5);
        for &(n, ci, h, w, co, k, stride, pad) in &[(2, 3, 5, 6, 4, 3, 1, 1), (1, 2, 8, 8, 3, 3, 2, 1), (3, 1, 4, 4, 2, 1, 1, 0), (2, 2, 7, 5, 2, 3, 2, 0)] {
            let g = ConvGeom::new(n, ci, h, w, co, k, stride, pad).unwrap();
            let x: Vec<f64> = (0..n * ci * h * w).map(|_| rng.normal()).collect();
            let wt: Vec<f64> = (0..co * ci * k * k).map(|_| rng.normal()).collect();
            let bias: Vec<f64> = (0..co).map(|_| rng.normal()).collect();
            let gout: Vec<f64> = (0..n * co * g.ho * g.wo).map(|_| rng.normal()).collect();
            let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12);
            assert!(close(&forward(&g, &x, &wt, Some(&bias)), &forward_direct(&g, &x, &wt, Some(&bias))));
            let (a, b) = (backward(&g, &x, &wt, &gout, true, true), backward_direct(&g, &x, &wt, &gout, true, true));
            assert!(close(&a.0, &b.0) && close(&a.1, &b.1) && close(&a.2, &b.2));
        }
    }
}
