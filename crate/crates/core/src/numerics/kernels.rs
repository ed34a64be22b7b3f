//! Slice-level kernels shared by the tape and the forward-only metric code.
//!
//! Matrix products go through a blocked GEMM in the storage type; the
//! remaining reductions accumulate in `f64`.

use alloc::vec;
use alloc::vec::Vec;

use super::Scalar;

pub fn transpose<F: Scalar>(a: &[F], rows: usize, cols: usize, out: &mut [F]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    check_lens(a.len(), m * k, b.len(), k * n);
    gemm_new(m, k, n, a, (k as isize, 1), b, (n as isize, 1))
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    check_lens(a.len(), m * k, b.len(), n * k);
    gemm_new(m, k, n, a, (k as isize, 1), b, (1, k as isize))
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<F: Scalar>(a: &[F], b: &[F], k: usize, m: usize, n: usize) -> Vec<F> {
    check_lens(a.len(), k * m, b.len(), k * n);
    gemm_new(m, k, n, a, (1, m as isize), b, (n as isize, 1))
}

fn gemm_new<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    sa: (isize, isize),
    b: &[F],
    sb: (isize, isize),
) -> Vec<F> {
    let mut out = Vec::with_capacity(m * n);
    // SAFETY: operand lengths were checked against the strides, and with a
    // zero beta the GEMM writes all m·n outputs before they become visible.
    unsafe {
        F::gemm(m, k, n, a, sa, b, sb, out.as_mut_ptr(), (n as isize, 1));
        out.set_len(m * n);
    }
    out
}

fn check_lens(a: usize, want_a: usize, b: usize, want_b: usize) {
    assert!(
        a == want_a && b == want_b,
        "matmul operand lengths {a}/{b} do not match {want_a}/{want_b}"
    );
}

/// Geometry of a square-kernel, zero-padded convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad() - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad() - self.k) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.in_ch * self.k * self.k
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` lies inside `[0, w)`.
fn valid_cols(g: ConvGeom, kx: usize, ow: usize) -> (usize, usize) {
    let (pad, s) = (g.pad(), g.stride);
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
    let hi = if g.w + pad <= kx {
        0
    } else {
        (g.w + pad - kx).div_ceil(s).min(ow)
    };
    (lo, hi.max(lo))
}

/// Unfolds `[C, H, W]` into `[C·k·k, oh·ow]` patches.
pub fn im2col<F: Scalar>(x: &[F], g: ConvGeom) -> Vec<F> {
    let (oh, ow, pad) = (g.out_h(), g.out_w(), g.pad() as isize);
    let mut cols = vec![F::zero(); g.patch() * oh * ow];
    for c in 0..g.in_ch {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_cols(g, kx, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out = &mut dst[oy * ow + lo..oy * ow + hi];
                    let first = lo * g.stride + kx - g.pad();
                    if g.stride == 1 {
                        out.copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (o, v) in out.iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds patch gradients back onto `[C, H, W]`.
pub fn col2im<F: Scalar>(cols: &[F], g: ConvGeom, out: &mut [F]) {
    let (oh, ow, pad) = (g.out_h(), g.out_w(), g.pad() as isize);
    for c in 0..g.in_ch {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_cols(g, kx, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let first = lo * g.stride + kx - g.pad();
                    let grads = &src[oy * ow + lo..oy * ow + hi];
                    if g.stride == 1 {
                        for (d, v) in dst[first..first + grads.len()].iter_mut().zip(grads) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(grads) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution without bias: weight `[O, C, k, k]`, output `[O, oh, ow]`.
pub fn conv2d<F: Scalar>(x: &[F], weight: &[F], out_ch: usize, g: ConvGeom) -> Vec<F> {
    conv_cols(&im2col(x, g), weight, out_ch, g)
}

/// Forward convolution from already unfolded patches.
pub fn conv_cols<F: Scalar>(cols: &[F], weight: &[F], out_ch: usize, g: ConvGeom) -> Vec<F> {
    matmul(weight, cols, out_ch, g.patch(), g.out_h() * g.out_w())
}

pub fn avg_pool2<F: Scalar>(x: &[F], ch: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::lit(0.25);
    let mut out = vec![F::zero(); ch * oh * ow];
    for c in 0..ch {
        for y in 0..oh {
            for x0 in 0..ow {
                let base = c * h * w;
                let s = x[base + 2 * y * w + 2 * x0]
                    + x[base + 2 * y * w + 2 * x0 + 1]
                    + x[base + (2 * y + 1) * w + 2 * x0]
                    + x[base + (2 * y + 1) * w + 2 * x0 + 1];
                out[(c * oh + y) * ow + x0] = s * quarter;
            }
        }
    }
    out
}

/// Numerically stable softmax of each row, in place.
pub fn softmax_rows<F: Scalar>(x: &mut [F], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += v.wide();
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v = F::lit(v.wide() * inv);
        }
    }
}

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}
