//! Floating-point abstraction shared by every solver in the crate.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use serde::Serialize;

/// Real scalar the solvers are generic over. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Serialize
    + Send
    + Sync
    + rustfft::FftNum
    + 'static
{
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal not representable")
    }

    /// Converts a count into `Self`.
    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count not representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
