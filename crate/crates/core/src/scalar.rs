//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point working type: `f32` or `f64`.
///
/// Quantization grids are powers of two times small integers, so both
/// widths represent every grid point of the supported formats exactly.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Exact `floor(log2(|x|))` for finite nonzero `x`, read off the binary
    /// exponent so that powers of two never land on the wrong side.
    fn floor_log2(self) -> i32 {
        debug_assert!(self.is_finite() && self != Self::zero());
        let (mantissa, exponent, _) = self.integer_decode();
        let width = 63 - mantissa.leading_zeros() as i32;
        exponent as i32 + width
    }

    /// `2^k` in this type.
    fn exp2i(k: i32) -> Self {
        Self::lit(2f64.powi(k))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
