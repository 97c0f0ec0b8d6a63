use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of a [`Tensor`](super::Tensor).
///
/// Training runs in `f32`; `f64` exists so that finite-difference gradient
/// checks have enough precision to be meaningful.
pub trait Scalar:
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
    /// `c = alpha * op(a) * op(b) + beta * c` with row-major `a`, `b`, `c`.
    ///
    /// `op(a)` is `m x k`; when `trans_a` is set, `a` is stored as `k x m`.
    /// Likewise `op(b)` is `k x n` and `b` is stored `n x k` when `trans_b`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn erf(self) -> Self;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical (rows x cols); storage is (cols x rows) when transposed
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! gemm_impl {
    ($t:ty, $kernel:path, $erf:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs size");
                assert_eq!(b.len(), k * n, "gemm: rhs size");
                assert_eq!(c.len(), m * n, "gemm: out size");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for x in c.iter_mut() {
                        *x *= beta;
                    }
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                // SAFETY: slice lengths are checked above and the strides
                // describe in-bounds row-major layouts of those slices.
                unsafe {
                    $kernel(
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
                        n as isize,
                        1,
                    );
                }
            }

            fn erf(self) -> Self {
                $erf(self)
            }
        }
    };
}

gemm_impl!(f32, matrixmultiply::sgemm, libm::erff);
gemm_impl!(f64, matrixmultiply::dgemm, libm::erf);
