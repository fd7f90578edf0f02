//! Floating-point scalar abstraction shared by the rating math, the tensor
//! kernels and the networks.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` constant.
    #[inline]
    fn of(x: f64) -> Self {
        // from_f64 only fails for types that cannot represent a finite f64,
        // which neither implementor can fail on
        Self::from_f64(x).unwrap()
    }

    /// Conversion from a count.
    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).unwrap()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip() {
        assert_eq!(f64::of(0.25).as_f64(), 0.25);
        assert_eq!(f32::of(0.25).as_f64(), 0.25);
        assert_eq!(f32::of_usize(12), 12.0);
    }
}
