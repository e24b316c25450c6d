//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable throughout the crate: `f32` or `f64`.
///
/// Everything numeric is written against this trait. Accuracy targets in the
/// tests (1e-9 and tighter) assume `f64`; `f32` works for the same code paths
/// at single-precision tolerances.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal; lossy for `f32`.
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn infinity() -> Self;
    fn neg_infinity() -> Self;
    fn is_finite_val(self) -> bool;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn infinity() -> Self {
                <$t>::INFINITY
            }
            #[inline]
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
            #[inline]
            fn is_finite_val(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Pairwise (cascade) summation in slice order. Deterministic for a given
/// input order and considerably more accurate than a running sum.
pub fn pairwise_sum<T: Real>(values: &[T]) -> T {
    const BLOCK: usize = 8;
    if values.len() <= BLOCK {
        values.iter().fold(T::zero(), |acc, &v| acc + v)
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Mean by pairwise summation; `None` for an empty slice.
pub fn pairwise_mean<T: Real>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    Some(pairwise_sum(values) / T::from_usize(values.len())?)
}
