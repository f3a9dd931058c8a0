use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type a computation graph runs in. `f32` for training, `f64` for
/// gradient checking.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a @ b + beta * c` with arbitrary row/column strides.
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

    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
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
                debug_assert!(max_offset(m, k, rsa, csa) < a.len().max(1));
                debug_assert!(max_offset(k, n, rsb, csb) < b.len().max(1));
                debug_assert!(max_offset(m, n, rsc, csc) < c.len());
                // SAFETY: the slices cover every offset addressed by the
                // given shapes and strides (checked above in debug builds,
                // and by construction at every call site).
                unsafe {
                    $kernel(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[allow(dead_code)]
fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize
}

/// Row-major `[m, k] @ [k, n]`, accumulating into `c` when `accumulate` is set.
pub fn matmul_into<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { F::one() } else { F::zero() };
    F::gemm(m, k, n, F::one(), a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `c (+)= a^T @ b` where `a` is `[k, m]` and `b` is `[k, n]`, both row-major.
pub fn matmul_tn_into<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { F::one() } else { F::zero() };
    F::gemm(m, k, n, F::one(), a, 1, m as isize, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `c (+)= a @ b^T` where `a` is `[m, k]` and `b` is `[n, k]`, both row-major.
pub fn matmul_nt_into<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { F::one() } else { F::zero() };
    F::gemm(m, k, n, F::one(), a, k as isize, 1, b, 1, k as isize, beta, c, n as isize, 1);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_loops() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul_into(&a, &b, &mut c, m, k, n, false);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // a^T stored as [k, m]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul_tn_into(&at, &b, &mut c2, m, k, n, false);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c3 = vec![1.0; m * n];
        matmul_nt_into(&a, &bt, &mut c3, m, k, n, true);
        for (x, y) in c3.iter().zip(&want) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }
}
