//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar the networks, solvers and simulator are generic over (f32 or f64).
pub trait Scalar: RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display {}

impl<T> Scalar for T where T: RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display {}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 literal representable in scalar type")
}

#[inline]
pub fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Sign with `sign(0) = +1`.
#[inline]
pub fn sign_pos<T: Scalar>(v: T) -> T {
    if v < T::zero() {
        -T::one()
    } else {
        T::one()
    }
}
