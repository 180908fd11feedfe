//! Scalar abstraction shared by every numerical kernel.

use nalgebra::{DMatrix, RealField};
use num_traits::ToPrimitive;

/// Floating-point type the numerical kernels are generic over (`f32` or `f64`).
///
/// Everything the crate needs from the scalar comes through nalgebra's
/// `RealField` (which itself builds on `num-traits`), plus lossless-enough
/// conversions to and from `f64` for constants and serialization.
pub trait Real: RealField + Copy + ToPrimitive {
    /// Converts an `f64` constant into this scalar type.
    fn lit(x: f64) -> Self;

    /// Widens (or passes through) to `f64`.
    fn to_f64_lossy(self) -> f64;

    /// Machine epsilon of the scalar type.
    fn epsilon() -> Self;

    #[inline]
    fn is_finite_value(self) -> bool {
        self.to_f64_lossy().is_finite()
    }

    /// `c ← α · op(a) · op(b) + β · c`, where `op` transposes when the
    /// matching flag is set. The default copies transposed operands; the
    /// `f32`/`f64` versions pass strides to the blocked kernel instead.
    fn gemm_t(
        alpha: Self,
        a: &DMatrix<Self>,
        trans_a: bool,
        b: &DMatrix<Self>,
        trans_b: bool,
        beta: Self,
        c: &mut DMatrix<Self>,
    ) {
        let a = if trans_a { a.transpose() } else { a.clone() };
        let b = if trans_b { b.transpose() } else { b.clone() };
        c.gemm(alpha, &a, &b, beta);
    }
}

/// Shape and strides of `op(m)` for a column-major matrix.
fn op_layout<T>(m: &DMatrix<T>, trans: bool) -> (usize, usize, isize, isize) {
    let (r, c) = m.shape();
    if trans {
        (c, r, r as isize, 1)
    } else {
        (r, c, 1, r as isize)
    }
}

macro_rules! strided_gemm {
    ($kernel:path) => {
        fn gemm_t(
            alpha: Self,
            a: &DMatrix<Self>,
            trans_a: bool,
            b: &DMatrix<Self>,
            trans_b: bool,
            beta: Self,
            c: &mut DMatrix<Self>,
        ) {
            let (m, k, rsa, csa) = op_layout(a, trans_a);
            let (k2, n, rsb, csb) = op_layout(b, trans_b);
            assert_eq!(k, k2, "gemm inner dimensions differ");
            assert_eq!(c.shape(), (m, n), "gemm output shape mismatch");
            let rsc = 1;
            let csc = m as isize;
            // SAFETY: the pointers cover the full column-major storage of
            // each matrix and the strides/shapes above stay inside it; `c`
            // does not alias `a` or `b` (it is borrowed mutably).
            unsafe {
                $kernel(
                    m, k, n, alpha,
                    a.as_ptr(), rsa, csa,
                    b.as_ptr(), rsb, csb,
                    beta, c.as_mut_ptr(), rsc, csc,
                );
            }
        }
    };
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    #[inline]
    fn epsilon() -> Self {
        f32::EPSILON
    }
    strided_gemm!(matrixmultiply::sgemm);
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
    #[inline]
    fn epsilon() -> Self {
        f64::EPSILON
    }
    strided_gemm!(matrixmultiply::dgemm);
}

/// Shorthand for [`Real::lit`].
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::lit(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check<T: Real>() {
        let a = DMatrix::<T>::from_fn(3, 4, |i, j| T::lit((i * 4 + j) as f64 * 0.25 - 1.0));
        let b = DMatrix::<T>::from_fn(5, 4, |i, j| T::lit((i as f64 - j as f64) * 0.5));
        let mut c = DMatrix::<T>::from_element(3, 5, T::one());
        T::gemm_t(T::lit(2.0), &a, false, &b, true, T::lit(0.5), &mut c);
        let expected = (&a * b.transpose()) * T::lit(2.0) + DMatrix::from_element(3, 5, T::lit(0.5));
        assert!((c - expected).amax() < T::lit(1e-5));

        let mut d = DMatrix::<T>::zeros(4, 4);
        T::gemm_t(T::one(), &a, true, &a, false, T::zero(), &mut d);
        assert!((d - a.transpose() * &a).amax() < T::lit(1e-5));
    }

    #[test]
    fn strided_gemm_matches_dense_products() {
        check::<f64>();
        check::<f32>();
    }
}
