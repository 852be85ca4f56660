//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Training and inference run in `f32`; the gradient-check and equivalence
//! suites instantiate the same code at `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable as tensor element.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Unit roundoff of the type.
    const EPSILON: Self;

    /// `c = alpha * op(a) * op(b) + beta * c` on strided row/column layouts.
    ///
    /// Strides are in elements; a transposed operand is expressed by swapping
    /// its row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const EPSILON: Self = <$t>::EPSILON;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                debug_assert!(c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    // matrixmultiply reads no operand data when k == 0 but still
                    // scales c by beta.
                    for v in c[..m * n].iter_mut() {
                        *v *= beta;
                    }
                    return;
                }
                // SAFETY: strides and extents describe in-bounds accesses of `a`
                // (m x k), `b` (k x n) and the contiguous row-major `c` (m x n).
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Shorthand for converting literals into a generic scalar.
#[inline]
pub(crate) fn s<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}
