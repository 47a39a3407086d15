//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Linear algebra goes through nalgebra's [`RealField`]; literal constants and
//! integer counts are converted through num-traits. Both `f32` and `f64`
//! satisfy the bound.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point type usable by the estimators.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Display + Debug + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only for types that cannot represent finite doubles.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("count fits scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Machine epsilon, for `f32` or `f64`.
    #[inline]
    fn machine_eps() -> Self {
        if Self::lit(1.0) + Self::lit(1e-10) == Self::lit(1.0) {
            Self::lit(f32::EPSILON as f64)
        } else {
            Self::lit(f64::EPSILON)
        }
    }

    #[inline]
    fn finite(self) -> bool {
        self.as_f64().is_finite()
    }
}

impl<T> Scalar for T where
    T: RealField + Copy + FromPrimitive + ToPrimitive + Display + Debug + Send + Sync + 'static
{
}
