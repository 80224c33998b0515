//! Twin convolutional encoders, the bias-free linear blendshape decoder,
//! their analytic gradients, and finite-difference gradient checking.
//!
//! Everything is generic over [`Real`] so training runs in `f32` while
//! gradient checking switches the same model to `f64`.

mod encoder;
mod grad;
mod layers;
mod model;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use encoder::{BlockShape, EncoderArch, EncoderCache, EncoderParams};
pub use grad::{
    backward, evaluate_batch, gradient_check, BatchInput, BatchObjective, DomainBatch,
    GradCheckReport, GroupCheck, GroupStatus, LossConfig, GRADCHECK_ABS_FLOOR,
};
pub use layers::{instance_norm_forward, INSTANCE_NORM_EPS};
pub use model::{
    decode, encode, BlendshapeBasis, BlendshapeModel, Domain, LatentWeights, ModelShape,
    BASIS_INIT_SCALE, NORM_SCALE_INIT,
};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }

    fn of_f32(x: f32) -> Self;

    fn as_f32(self) -> f32;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: out too short");
                // SAFETY: bounds checked above for non-negative strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            fn of_f32(x: f32) -> Self {
                x as $t
            }

            fn as_f32(self) -> f32 {
                self as f32
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major `out[m x n] = a[m x k] * b[k x n]` (+ `out` when `accumulate`).
pub(crate) fn matmul<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        beta,
        out,
        n as isize,
        1,
    );
}

/// `out[m x n] = a^T * b` with `a` stored `k x m` and `b` stored `k x n`.
pub(crate) fn matmul_tn<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        1,
        m as isize,
        b,
        n as isize,
        1,
        beta,
        out,
        n as isize,
        1,
    );
}

/// `out[m x n] = a * b^T` with `a` stored `m x k` and `b` stored `n x k`.
pub(crate) fn matmul_nt<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        1,
        k as isize,
        beta,
        out,
        n as isize,
        1,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        out
    }

    fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn matmul_variants_agree_with_triple_loop() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let expect = naive(&a, &b, m, k, n);

        let mut out = vec![0.0; m * n];
        matmul(&a, &b, &mut out, m, k, n, false);
        let mut tn = vec![0.0; m * n];
        matmul_tn(&transpose(&a, m, k), &b, &mut tn, m, k, n, false);
        let mut nt = vec![0.0; m * n];
        matmul_nt(&a, &transpose(&b, k, n), &mut nt, m, k, n, false);
        for i in 0..m * n {
            assert!((out[i] - expect[i]).abs() < 1e-12);
            assert!((tn[i] - expect[i]).abs() < 1e-12);
            assert!((nt[i] - expect[i]).abs() < 1e-12);
        }
        matmul(&a, &b, &mut out, m, k, n, true);
        assert!((out[4] - 2.0 * expect[4]).abs() < 1e-12);
    }
}
