//! Scalar abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Real scalar accepted by the numerical core: `f32`, `f64`, or a forward-mode
/// [`Dual`](crate::dual::Dual) built on top of either.
pub trait Scalar:
    Float
    + FromPrimitive
    + Debug
    + Display
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Lift an `f64` constant.
    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable in scalar type")
    }

    /// Primal value as `f64` (drops derivative parts).
    #[inline]
    fn re(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Lift a value of another scalar type, dropping any derivative parts.
    #[inline]
    fn lift<U: Scalar>(v: U) -> Self {
        Self::c(v.re())
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
