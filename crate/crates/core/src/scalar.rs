//! Floating-point scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type the clustering, coreset, scoring and metric code is generic over.
///
/// Implemented for `f32` and `f64`. Archives are always stored as `f32`; banks and
/// scores may be computed in either precision.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of_f32(v: f32) -> Self;

    fn from_f64_lossy(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn as_f32(self) -> f32;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn of_f32(v: f32) -> Self {
                v as $t
            }

            #[inline]
            fn from_f64_lossy(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn as_f32(self) -> f32 {
                self as f32
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Squared Euclidean distance between two equal-length slices.
#[inline]
pub fn squared_l2<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| {
            let d = x - y;
            acc + d * d
        })
}

#[inline]
pub fn l2<T: Scalar>(a: &[T], b: &[T]) -> T {
    squared_l2(a, b).sqrt()
}

/// Returns the first row index holding a NaN or infinite entry.
pub(crate) fn first_non_finite<T: Scalar>(points: ndarray::ArrayView2<'_, T>) -> Option<usize> {
    points
        .outer_iter()
        .position(|row| row.iter().any(|v| !v.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        assert_eq!(l2(&[0.0f32, 0.0], &[3.0, 4.0]), 5.0);
        assert_eq!(squared_l2(&[1.0f64, 1.0], &[1.0, 1.0]), 0.0);
    }
}
