use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar type the whole library is generic over (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Guard added to every log argument and division denominator.
    fn guard() -> Self;

    /// Lossless-enough conversion from a literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    fn guard() -> Self {
        1e-12
    }
}

impl Scalar for f32 {
    // 1e-12 underflows relative to f32 resolution of O(1) values but is still representable.
    fn guard() -> Self {
        1e-12
    }
}
