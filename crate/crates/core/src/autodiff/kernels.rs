//! Forward and backward kernels on raw slices. Layouts are row-major:
//! features `C×L×H×W`, spatial kernels `Co×Ci×1×3×3`, temporal kernels
//! `Co×Ci×3×1×1`, channel-mixing weights `Ci×Co`.

use rayon::prelude::*;

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl SpatialGeom {
    pub fn out_height(&self) -> usize {
        self.height.div_ceil(self.stride)
    }

    pub fn out_width(&self) -> usize {
        self.width.div_ceil(self.stride)
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Output indices `o` with `0 ≤ o·stride + k − 1 < n`, as `[lo, hi)`.
    fn valid_range(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= 1 { 0 } else { 1usize.div_ceil(s) };
        // o·s + k − 1 ≤ n_in − 1  ⇔  o ≤ (n_in − k)/s
        let hi = if n_in + 1 > k { ((n_in - k) / s + 1).min(n_out) } else { 0 };
        (lo, hi.max(lo))
    }
}

pub fn conv_spatial_forward<T: Real>(x: &[T], w: &[T], b: &[T], g: &SpatialGeom) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let out_chan = g.frames * g.out_plane();
    let mut y = vec![T::zero(); g.c_out * out_chan];
    y.par_chunks_mut(out_chan).enumerate().for_each(|(co, yc)| {
        yc.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..g.c_in {
            for kh in 0..3 {
                let (oy_lo, oy_hi) = g.valid_range(kh, g.height, oh);
                for kw in 0..3 {
                    let wv = w[((co * g.c_in + ci) * 3 + kh) * 3 + kw];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox_lo, ox_hi) = g.valid_range(kw, g.width, ow);
                    for l in 0..g.frames {
                        let xb = (ci * g.frames + l) * g.in_plane();
                        let yb = l * g.out_plane();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + kh - 1;
                            let xrow = &x[xb + iy * g.width..xb + (iy + 1) * g.width];
                            let yrow = &mut yc[yb + oy * ow..yb + (oy + 1) * ow];
                            for ox in ox_lo..ox_hi {
                                yrow[ox] += wv * xrow[ox * g.stride + kw - 1];
                            }
                        }
                    }
                }
            }
        }
    });
    y
}

/// Returns `(dx, dw, db)`.
pub fn conv_spatial_backward<T: Real>(x: &[T], w: &[T], dy: &[T], g: &SpatialGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let in_chan = g.frames * g.in_plane();
    let out_chan = g.frames * g.out_plane();

    let mut dx = vec![T::zero(); g.c_in * in_chan];
    dx.par_chunks_mut(in_chan).enumerate().for_each(|(ci, dxc)| {
        for co in 0..g.c_out {
            for kh in 0..3 {
                let (oy_lo, oy_hi) = g.valid_range(kh, g.height, oh);
                for kw in 0..3 {
                    let wv = w[((co * g.c_in + ci) * 3 + kh) * 3 + kw];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox_lo, ox_hi) = g.valid_range(kw, g.width, ow);
                    for l in 0..g.frames {
                        let xb = l * g.in_plane();
                        let yb = (co * g.frames + l) * g.out_plane();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + kh - 1;
                            let dyrow = &dy[yb + oy * ow..yb + (oy + 1) * ow];
                            let dxrow = &mut dxc[xb + iy * g.width..xb + (iy + 1) * g.width];
                            for ox in ox_lo..ox_hi {
                                dxrow[ox * g.stride + kw - 1] += wv * dyrow[ox];
                            }
                        }
                    }
                }
            }
        }
    });

    let mut dw = vec![T::zero(); g.c_out * g.c_in * 9];
    dw.par_chunks_mut(g.c_in * 9).enumerate().for_each(|(co, dwc)| {
        for ci in 0..g.c_in {
            for kh in 0..3 {
                let (oy_lo, oy_hi) = g.valid_range(kh, g.height, oh);
                for kw in 0..3 {
                    let (ox_lo, ox_hi) = g.valid_range(kw, g.width, ow);
                    let mut acc = T::zero();
                    for l in 0..g.frames {
                        let xb = (ci * g.frames + l) * g.in_plane();
                        let yb = (co * g.frames + l) * g.out_plane();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + kh - 1;
                            let xrow = &x[xb + iy * g.width..xb + (iy + 1) * g.width];
                            let dyrow = &dy[yb + oy * ow..yb + (oy + 1) * ow];
                            for ox in ox_lo..ox_hi {
                                acc += dyrow[ox] * xrow[ox * g.stride + kw - 1];
                            }
                        }
                    }
                    dwc[(ci * 3 + kh) * 3 + kw] = acc;
                }
            }
        }
    });

    let db = dy.chunks_exact(out_chan).map(|c| c.iter().copied().sum()).collect();
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemporalGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub frames: usize,
    /// `H·W`
    pub plane: usize,
}

#[inline]
fn replicate(l: usize, k: usize, frames: usize) -> usize {
    // source frame for tap k ∈ {0,1,2} at output frame l, clamped at the ends
    (l + k).saturating_sub(1).min(frames - 1)
}

pub fn conv_temporal_forward<T: Real>(x: &[T], w: &[T], b: &[T], g: &TemporalGeom) -> Vec<T> {
    let chan = g.frames * g.plane;
    let mut y = vec![T::zero(); g.c_out * chan];
    y.par_chunks_mut(chan).enumerate().for_each(|(co, yc)| {
        yc.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..g.c_in {
            for k in 0..3 {
                let wv = w[(co * g.c_in + ci) * 3 + k];
                if wv == T::zero() {
                    continue;
                }
                for l in 0..g.frames {
                    let src = replicate(l, k, g.frames);
                    let xs = &x[(ci * g.frames + src) * g.plane..(ci * g.frames + src + 1) * g.plane];
                    let ys = &mut yc[l * g.plane..(l + 1) * g.plane];
                    for (yv, xv) in ys.iter_mut().zip(xs) {
                        *yv += wv * *xv;
                    }
                }
            }
        }
    });
    y
}

pub fn conv_temporal_backward<T: Real>(x: &[T], w: &[T], dy: &[T], g: &TemporalGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let chan = g.frames * g.plane;
    let mut dx = vec![T::zero(); g.c_in * chan];
    dx.par_chunks_mut(chan).enumerate().for_each(|(ci, dxc)| {
        for co in 0..g.c_out {
            for k in 0..3 {
                let wv = w[(co * g.c_in + ci) * 3 + k];
                if wv == T::zero() {
                    continue;
                }
                for l in 0..g.frames {
                    let src = replicate(l, k, g.frames);
                    let dys = &dy[(co * g.frames + l) * g.plane..(co * g.frames + l + 1) * g.plane];
                    let dxs = &mut dxc[src * g.plane..(src + 1) * g.plane];
                    for (d, gy) in dxs.iter_mut().zip(dys) {
                        *d += wv * *gy;
                    }
                }
            }
        }
    });
    let mut dw = vec![T::zero(); g.c_out * g.c_in * 3];
    dw.par_chunks_mut(g.c_in * 3).enumerate().for_each(|(co, dwc)| {
        for ci in 0..g.c_in {
            for k in 0..3 {
                let mut acc = T::zero();
                for l in 0..g.frames {
                    let src = replicate(l, k, g.frames);
                    let dys = &dy[(co * g.frames + l) * g.plane..(co * g.frames + l + 1) * g.plane];
                    let xs = &x[(ci * g.frames + src) * g.plane..(ci * g.frames + src + 1) * g.plane];
                    for (gy, xv) in dys.iter().zip(xs) {
                        acc += *gy * *xv;
                    }
                }
                dwc[ci * 3 + k] = acc;
            }
        }
    });
    let db = dy.chunks_exact(chan).map(|c| c.iter().copied().sum()).collect();
    (dx, dw, db)
}

/// `y[co,p] = b[co] + Σ_ci w[ci,co]·x[ci,p]`
pub fn channel_mix_forward<T: Real>(x: &[T], w: &[T], b: &[T], c_in: usize, c_out: usize, plane: usize) -> Vec<T> {
    let mut y = vec![T::zero(); c_out * plane];
    y.par_chunks_mut(plane).enumerate().for_each(|(co, yc)| {
        yc.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..c_in {
            let wv = w[ci * c_out + co];
            let xs = &x[ci * plane..(ci + 1) * plane];
            for (yv, xv) in yc.iter_mut().zip(xs) {
                *yv += wv * *xv;
            }
        }
    });
    y
}

pub fn channel_mix_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    c_in: usize,
    c_out: usize,
    plane: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); c_in * plane];
    dx.par_chunks_mut(plane).enumerate().for_each(|(ci, dxc)| {
        for co in 0..c_out {
            let wv = w[ci * c_out + co];
            let dys = &dy[co * plane..(co + 1) * plane];
            for (d, gy) in dxc.iter_mut().zip(dys) {
                *d += wv * *gy;
            }
        }
    });
    let mut dw = vec![T::zero(); c_in * c_out];
    dw.par_chunks_mut(c_out).enumerate().for_each(|(ci, dwr)| {
        let xs = &x[ci * plane..(ci + 1) * plane];
        for (co, slot) in dwr.iter_mut().enumerate() {
            let dys = &dy[co * plane..(co + 1) * plane];
            *slot = xs.iter().zip(dys).map(|(a, b)| *a * *b).sum();
        }
    });
    let db = dy.chunks_exact(plane).map(|c| c.iter().copied().sum()).collect();
    (dx, dw, db)
}

/// `y[n,o] = b[o] + Σ_i x[n,i]·w[i,o]`
pub fn dense_forward<T: Real>(x: &[T], w: &[T], b: &[T], d_in: usize, d_out: usize) -> Vec<T> {
    let rows = x.len() / d_in;
    let mut y = Vec::with_capacity(rows * d_out);
    for xr in x.chunks_exact(d_in) {
        for o in 0..d_out {
            let mut acc = b[o];
            for (i, xv) in xr.iter().enumerate() {
                acc += *xv * w[i * d_out + o];
            }
            y.push(acc);
        }
    }
    y
}

pub fn dense_backward<T: Real>(x: &[T], w: &[T], dy: &[T], d_in: usize, d_out: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); d_in * d_out];
    let mut db = vec![T::zero(); d_out];
    for ((xr, dyr), dxr) in x.chunks_exact(d_in).zip(dy.chunks_exact(d_out)).zip(dx.chunks_exact_mut(d_in)) {
        for i in 0..d_in {
            let mut acc = T::zero();
            for o in 0..d_out {
                acc += w[i * d_out + o] * dyr[o];
                dw[i * d_out + o] += xr[i] * dyr[o];
            }
            dxr[i] = acc;
        }
        for o in 0..d_out {
            db[o] += dyr[o];
        }
    }
    (dx, dw, db)
}

/// Nearest-neighbor ×2 upsampling of the two trailing axes.
pub fn upsample2_forward<T: Real>(x: &[T], outer: usize, h: usize, w: usize) -> Vec<T> {
    let mut y = vec![T::zero(); outer * 4 * h * w];
    for o in 0..outer {
        for r in 0..2 * h {
            for c in 0..2 * w {
                y[(o * 2 * h + r) * 2 * w + c] = x[(o * h + r / 2) * w + c / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &[T], outer: usize, h: usize, w: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); outer * h * w];
    for o in 0..outer {
        for r in 0..2 * h {
            for c in 0..2 * w {
                dx[(o * h + r / 2) * w + c / 2] += dy[(o * 2 * h + r) * 2 * w + c];
            }
        }
    }
    dx
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
