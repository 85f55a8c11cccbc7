//! Scalar abstraction over the two floating-point widths the engine runs at.
//!
//! Verification paths use `f64`; training may run at `f32`. Everything in
//! the crate is generic over [`Scalar`], with concrete aliases exported at
//! the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point element type: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Send + Sync + Debug + Display + 'static
{
    /// Dense row-major matrix product `c = a · b` (or `c += a · b` when
    /// `accumulate` is set), where `a` is `m×k`, `b` is `k×n`, `c` is `m×n`.
    /// `trans_a`/`trans_b` read the operand as its transpose, i.e. the raw
    /// buffer holds the `k×m` (resp. `n×k`) matrix.
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        b: &[Self],
        c: &mut [Self],
        accumulate: bool,
    );

    fn of_f64(v: f64) -> Self {
        Self::from(v).expect("f64 conversion")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("f64 conversion")
    }
}

fn gemm_strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // Row-major storage; a transposed view swaps the strides. `rows`/`cols`
    // are the logical dimensions of the operand as used by the product.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

impl Scalar for f32 {
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        b: &[f32],
        c: &mut [f32],
        accumulate: bool,
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        if m == 0 || n == 0 {
            return;
        }
        let beta = if accumulate { 1.0 } else { 0.0 };
        if k == 0 {
            if !accumulate {
                c.fill(0.0);
            }
            return;
        }
        let (rsa, csa) = gemm_strides(trans_a, m, k);
        let (rsb, csb) = gemm_strides(trans_b, k, n);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        b: &[f64],
        c: &mut [f64],
        accumulate: bool,
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        if m == 0 || n == 0 {
            return;
        }
        let beta = if accumulate { 1.0 } else { 0.0 };
        if k == 0 {
            if !accumulate {
                c.fill(0.0);
            }
            return;
        }
        let (rsa, csa) = gemm_strides(trans_a, m, k);
        let (rsb, csb) = gemm_strides(trans_b, k, n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}
