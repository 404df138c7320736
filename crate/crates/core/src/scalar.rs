//! Scalar abstraction: the whole numeric stack is generic over the float
//! width so training runs in f32 while gradient checks run in f64.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar for every numeric kernel.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Conversion from literal space. Total for finite inputs.
    #[inline]
    fn fp(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    /// Widening back out for reporting and cross-precision checks.
    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }

    /// Element counts as a scalar (means, normalizations).
    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_roundtrip_is_exact_for_f64() {
        let v = f64::fp(0.1234567890123);
        assert_eq!(v.f64(), 0.1234567890123);
    }

    #[test]
    fn f32_narrowing_matches_as_cast() {
        let v = f32::fp(0.1);
        assert_eq!(v, 0.1f64 as f32);
    }

    #[test]
    fn counts_convert() {
        assert_eq!(f32::from_count(48 * 48), 2304.0f32);
        assert_eq!(f64::from_count(3), 3.0);
    }
}
