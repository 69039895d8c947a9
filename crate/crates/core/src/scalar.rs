//! Scalar abstraction shared by the numeric modules.
//!
//! Vectors, similarity scores, metric values and classifier probabilities are
//! generic over [`Real`]; `f64` is the default instantiation used by the
//! type aliases at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`.
    fn of(value: f64) -> Self {
        Self::from_f64(value).unwrap_or_else(Self::nan)
    }

    /// Conversion from a count.
    fn of_usize(value: usize) -> Self {
        Self::from_usize(value).unwrap_or_else(Self::infinity)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn hundred() -> Self {
        Self::of(100.0)
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + Sum
        + Default
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

/// Harmonic mean of precision and recall; zero when both are zero.
pub fn harmonic<T: Real>(precision: T, recall: T) -> T {
    let denom = precision + recall;
    if denom <= T::zero() {
        T::zero()
    } else {
        (T::one() + T::one()) * precision * recall / denom
    }
}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean<T: Real>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().copied().sum::<T>() / T::of_usize(values.len()))
    }
}
