//! Scalar abstraction for the numerical core.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar the numerical core is generic over: `f32` or `f64`.
pub trait Real: RealField + FromPrimitive + ToPrimitive + Copy {}

impl<T> Real for T where T: RealField + FromPrimitive + ToPrimitive + Copy {}

/// Cast a configuration constant into the working scalar type.
#[inline]
pub fn real<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("constant representable in scalar type")
}

/// Lossy conversion back to `f64` for reporting and diagnostics.
#[inline]
pub fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().expect("scalar convertible to f64")
}
