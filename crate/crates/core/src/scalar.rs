use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type accepted by every generic routine in this crate.
///
/// Implemented for `f32` and `f64`. Tolerances are written as `f64` literals
/// and converted with [`Scalar::lit`], so solvers tuned for `f64` may not
/// reach their default tolerances in `f32`.
pub trait Scalar:
    'static
    + Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
{
    /// Converts an `f64` constant into this type.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable")
    }

    /// Converts a count into this type.
    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    /// Widens to `f64`.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
