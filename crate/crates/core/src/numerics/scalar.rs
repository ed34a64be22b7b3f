use core::fmt::Debug;
use core::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, NumCast};

/// Element type of a [`Tensor`](super::Tensor).
///
/// Models store `f32`; gradient checks re-run the same graph in `f64`.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as NumCast>::from(x).unwrap()
    }

    #[inline]
    fn wide(self) -> f64 {
        self.to_f64().unwrap()
    }

    /// `c[m×n] = a[m×k] · b[k×n]` over arbitrary row/column strides.
    ///
    /// # Safety
    /// Every strided index must lie inside `a` and `b`, and `c` must be valid
    /// for writes at every strided index. `c` is written without being read.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: (isize, isize),
        b: &[Self],
        sb: (isize, isize),
        c: *mut Self,
        sc: (isize, isize),
    );
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        sa: (isize, isize),
        b: &[f32],
        sb: (isize, isize),
        c: *mut f32,
        sc: (isize, isize),
    ) {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            0.0,
            c,
            sc.0,
            sc.1,
        );
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        sa: (isize, isize),
        b: &[f64],
        sb: (isize, isize),
        c: *mut f64,
        sc: (isize, isize),
    ) {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            0.0,
            c,
            sc.0,
            sc.1,
        );
    }
}
