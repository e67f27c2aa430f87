//! Floating-point scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar type the analysis math is generic over (`f32` or `f64`).
///
/// Residuals are stored on disk as `f32`; [`Scalar::from_stored`] is the single
/// entry point for lifting stored values into the working precision.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn from_stored(v: f32) -> Self;

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn from_count(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).unwrap_or_else(Self::nan)
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_stored(v: f32) -> Self {
        v
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_stored(v: f32) -> Self {
        f64::from(v)
    }
}

/// Dot product of two equal-length slices.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Euclidean norm.
pub fn l2_norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub(crate) fn lift<T: Scalar>(row: &[f32]) -> Vec<T> {
    row.iter().map(|&v| T::from_stored(v)).collect()
}
