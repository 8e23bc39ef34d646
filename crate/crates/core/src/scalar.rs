//! Floating-point abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the detectors are generic over (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + Sum
    + Default
    + Debug
    + Display
    + FromStr
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + AddAssign
        + Sum
        + Default
        + Debug
        + Display
        + FromStr
        + Send
        + Sync
        + 'static
{
}

/// Converts an `f64` literal or configuration value into `T`.
#[inline]
pub fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 is representable in every Scalar")
}

#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().expect("Scalar converts to f64")
}
