//! Scalar abstraction shared by the ray geometry and projection code.
//!
//! Everything geometric is written against [`Real`], so the same code runs on
//! `f64`, `f32`, and on forward-mode dual numbers when the calibration needs
//! exact derivatives of the projection.

use nalgebra::RealField;
use num_traits::FromPrimitive;

/// Real scalar usable by the geometry kernels.
pub trait Real: RealField + FromPrimitive + Copy {}

impl<T: RealField + FromPrimitive + Copy> Real for T {}

/// Lossy conversion of an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(value: f64) -> T {
    T::from_f64(value).expect("every Real type can represent an f64 literal")
}

/// `f64` view of a scalar, dropping any derivative part.
#[inline]
pub fn to_f64<T: Real>(value: T) -> f64 {
    // `RealField` only guarantees a conversion to its own subset; go through
    // the simba superset relation to reach f64.
    nalgebra::try_convert::<T, f64>(value).unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_roundtrip() {
        assert_eq!(to_f64(lit::<f64>(2.5)), 2.5);
        assert_eq!(to_f64(lit::<f32>(0.5)), 0.5);
    }
}
