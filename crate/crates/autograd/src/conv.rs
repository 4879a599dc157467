//! im2col / col2im helpers for 2-D convolution with zero padding.

use crate::real::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self { cin, h, w, k, stride, pad, ho, wo })
    }

    /// Rows of the column matrix (`cin * k * k`).
    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Columns of the column matrix (`ho * wo`).
    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// True when the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride - pad + kx` lies
/// inside `[0, w)`.
#[inline]
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let (s, p, kx) = (g.stride, g.pad, kx);
    // ox * s + kx >= p  and  ox * s + kx < w + p
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    let hi = if g.w + p > kx { (g.w + p - kx).div_ceil(s).min(g.wo) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfolds one image `[cin, h, w]` into `[cin*k*k, ho*wo]`.
pub(crate) fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let ncols = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize - p + ky as isize;
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let ix0 = lo * s + kx - g.pad;
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[ix0 + j * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters and accumulates columns into `dx`.
pub(crate) fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let ncols = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * s + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize - p + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if s == 1 {
                        for (d, &v) in dst[ix0..ix0 + (hi - lo)].iter_mut().zip(srow) {
                            *d = *d + v;
                        }
                    } else {
                        for (j, &v) in srow.iter().enumerate() {
                            dst[ix0 + j * s] = dst[ix0 + j * s] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Transpose of a row-major `rows x cols` matrix into `dst` (`cols x rows`).
pub(crate) fn transpose<T: Real>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const B: usize = 8;
    let full = rows / B * B;
    for r0 in (0..full).step_by(B) {
        let band: [&[T]; B] = std::array::from_fn(|i| &src[(r0 + i) * cols..(r0 + i + 1) * cols]);
        for (c, out) in dst.chunks_exact_mut(rows).enumerate() {
            let out = &mut out[r0..r0 + B];
            for i in 0..B {
                out[i] = band[i][c];
            }
        }
    }
    for r in full..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}
