//! Floating-point scalar abstraction.
//!
//! The numeric core (tensors, autodiff, networks, losses, optimizer) is
//! generic over [`Scalar`] so it can run in either precision. The crate
//! root exports `f64`-backed aliases, which the pipeline code uses
//! throughout.

use std::fmt::{Debug, Display};

use num_traits::Float;

/// Scalar element type for tensors: an IEEE float with the usual
/// arithmetic, comparison and formatting traits.
pub trait Scalar:
    Float + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless embedding of `f64` constants into the scalar type
    /// (rounds when `Self` is narrower).
    fn from_f64(v: f64) -> Self;

    /// Widening conversion used when serializing or reporting.
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_conversions() {
        assert_eq!(f64::from_f64(0.25), 0.25);
        assert_eq!(0.25f64.to_f64(), 0.25);
        assert_eq!(f32::from_f64(0.25), 0.25f32);
        assert_eq!(0.25f32.to_f64(), 0.25);
    }

    #[test]
    fn narrowing_rounds() {
        // 1e-300 underflows to zero in f32; the trait must not panic.
        assert_eq!(f32::from_f64(1e-300), 0.0f32);
    }
}
