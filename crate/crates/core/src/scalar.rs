//! Scalar abstraction: all core math is generic over `f32`/`f64`.
//!
//! Training runs in `f32`; `f64` exists for the finite-difference
//! gradient-checking mode, where `f32` differences are too noisy.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar the tensor core operates on.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// General matrix multiply `c = alpha * a @ b + beta * c` with
    /// `a: m x k`, `b: k x n`, arbitrary element strides (rs = row stride,
    /// cs = column stride). `c` is row-major contiguous. Backed by
    /// `matrixmultiply`, which is single-threaded and bitwise
    /// deterministic for fixed inputs.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_rs: isize,
        a_cs: isize,
        b: &[Self],
        b_rs: isize,
        b_cs: isize,
        beta: Self,
        c: &mut [Self],
    );

    /// Row-major `c = a @ b`.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        assert_eq!(a.len(), m * k);
        assert_eq!(b.len(), k * n);
        Self::gemm_strided(
            m,
            k,
            n,
            Self::one(),
            a,
            k as isize,
            1,
            b,
            n as isize,
            1,
            Self::zero(),
            c,
        );
    }

    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 conversion")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("f64 conversion")
    }
}

impl Scalar for f32 {
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        a_rs: isize,
        a_cs: isize,
        b: &[f32],
        b_rs: isize,
        b_cs: isize,
        beta: f32,
        c: &mut [f32],
    ) {
        assert_eq!(c.len(), m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha, a.as_ptr(), a_rs, a_cs, b.as_ptr(), b_rs, b_cs, beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        a_rs: isize,
        a_cs: isize,
        b: &[f64],
        b_rs: isize,
        b_cs: isize,
        beta: f64,
        c: &mut [f64],
    ) {
        assert_eq!(c.len(), m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha, a.as_ptr(), a_rs, a_cs, b.as_ptr(), b_rs, b_cs, beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}
