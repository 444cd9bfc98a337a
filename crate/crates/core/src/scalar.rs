//! Scalar abstraction for the numeric core.
//!
//! Every quantity in the market model (powers, energies, prices, objective
//! values) flows through a single floating-point type. The core is generic
//! over that type; `f64` is the supported precision for the documented
//! tolerances and is what the crate-root aliases pin.

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar: `f32` or `f64`.
///
/// Tolerance constants in this crate are stated for `f64`; instantiating the
/// core at `f32` compiles but the shipped tolerances are tighter than `f32`
/// resolution at realistic power scales.
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Convert a compile-time `f64` constant. Panics only if the target type
    /// cannot represent any finite `f64`, which does not happen for f32/f64.
    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant must convert")
    }

    /// Lossy view as `f64` for formatting and export.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar must convert to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// max(|x|) over a slice; 0 for an empty slice.
pub fn inf_norm<S: Scalar>(xs: &[S]) -> S {
    xs.iter().fold(S::zero(), |acc, &x| acc.max(x.abs()))
}

/// Dot product.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
