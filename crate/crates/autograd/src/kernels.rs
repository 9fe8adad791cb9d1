//! Dense kernels shared by the forward and backward passes. All loops run in
//! a fixed order so results are bit-identical between runs.

use crate::tensor::Real;

/// Below this output width the kernels switch from row updates to dot
/// products over a transposed operand.
const NARROW: usize = 8;

/// `out[n×m] += a[n×k] · b[k×m]`
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    if m < NARROW {
        let bt = transpose(b, k, m);
        dots(a, &bt, out, n, k, m);
        return;
    }
    rows_axpy(a, b, out, n, k, m);
}

/// `out[n×m] += a[n×k] · b[m×k]ᵀ`
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    if m >= NARROW {
        let bt = transpose(b, m, k);
        rows_axpy(a, &bt, out, n, k, m);
        return;
    }
    dots(a, b, out, n, k, m);
}

/// `out[n×m] += a[k×n]ᵀ · b[k×m]`
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], k: usize, n: usize, m: usize) {
    debug_assert_eq!(a.len(), k * n);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    if m < NARROW {
        // accumulate outᵀ so the inner loop runs over the long axis
        let mut acc = vec![T::zero(); m * n];
        for p in 0..k {
            let a_row = &a[p * n..(p + 1) * n];
            for j in 0..m {
                axpy(&mut acc[j * n..(j + 1) * n], b[p * m + j], a_row);
            }
        }
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = out[i * m + j] + acc[j * n + i];
            }
        }
        return;
    }
    for p in 0..k {
        let a_row = &a[p * n..(p + 1) * n];
        let b_row = &b[p * m..(p + 1) * m];
        for (i, &api) in a_row.iter().enumerate() {
            if api == T::zero() {
                continue;
            }
            axpy(&mut out[i * m..(i + 1) * m], api, b_row);
        }
    }
}

/// `out[n×m] += a[n×k] · b[k×m]`, one scaled row of `b` at a time.
fn rows_axpy<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            axpy(out_row, aip, &b[p * m..(p + 1) * m]);
        }
    }
}

/// `out[n×m] += a[n×k] · b[m×k]ᵀ` as row-by-row dot products.
fn dots<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] = out[i * m + j] + dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

#[inline]
fn axpy<T: Real>(out: &mut [T], s: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + s * v;
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] = acc[0] + a[i] * b[i];
        acc[1] = acc[1] + a[i + 1] * b[i + 1];
        acc[2] = acc[2] + a[i + 2] * b[i + 2];
        acc[3] = acc[3] + a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of a square-kernel convolution over an `h×w×c` channels-last image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c
    }

    /// Source pixel index for output texel `(oy, ox)` and kernel tap `(ky, kx)`,
    /// or `None` inside the zero padding.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some(y as usize * self.w + x as usize)
        }
    }
}

pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow, pl) = (g.out_h(), g.out_w(), g.patch_len());
    let mut out = vec![T::zero(); oh * ow * pl];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut out[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    if let Some(src) = g.source(oy, ox, ky, kx) {
                        let dst = (ky * g.kernel + kx) * g.c;
                        row[dst..dst + g.c].copy_from_slice(&x[src * g.c..(src + 1) * g.c]);
                    }
                }
            }
        }
    }
    out
}

pub fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow, pl) = (g.out_h(), g.out_w(), g.patch_len());
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    if let Some(src) = g.source(oy, ox, ky, kx) {
                        let s = (ky * g.kernel + kx) * g.c;
                        for ch in 0..g.c {
                            dx[src * g.c + ch] = dx[src * g.c + ch] + row[s + ch];
                        }
                    }
                }
            }
        }
    }
}
