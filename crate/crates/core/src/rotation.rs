//! Rodrigues (axis-angle) rotations.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::scalar::{lit, Real};

fn skew<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(
        z, -w.z, w.y,
        w.z, z, -w.x,
        -w.y, w.x, z,
    )
}

/// Rotation matrix of the axis-angle vector `w` (angle = `|w|`, radians).
///
/// Uses the series form near the identity so that derivatives stay finite
/// at `w = 0`.
pub fn rodrigues<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let theta2 = w.norm_squared();
    let (a, b) = if theta2 < lit(1e-8) {
        (
            T::one() - theta2 / lit(6.0),
            lit::<T>(0.5) - theta2 / lit(24.0),
        )
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (T::one() - theta.cos()) / theta2)
    };
    let k = skew(w);
    Matrix3::identity() + k * a + k * k * b
}

/// Axis-angle vector of a rotation matrix.
pub fn rodrigues_from_matrix(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Closest rotation (Frobenius norm) to `m`, and whether `m` was closer to a
/// reflection (negative determinant).
pub fn nearest_rotation(m: &Matrix3<f64>) -> (Matrix3<f64>, bool) {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let r = u * v_t;
    if r.determinant() < 0.0 {
        // keep the reflection flag but return the best proper rotation
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        (u * d * v_t, true)
    } else {
        (r, false)
    }
}

/// Geodesic distance (radians) between two rotations.
pub fn angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_vector_is_identity() {
        assert_eq!(rodrigues(&Vector3::<f64>::zeros()), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rodrigues(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        assert_relative_eq!(r * Vector3::x(), Vector3::y(), epsilon = 1e-15);
    }

    #[test]
    fn nearest_rotation_fixes_scaling() {
        let r = rodrigues(&Vector3::new(0.1, -0.2, 0.3));
        let (fixed, reflected) = nearest_rotation(&(r * 1.3));
        assert!(!reflected);
        assert_relative_eq!(fixed, r, epsilon = 1e-12);
        let mut mirror = r;
        mirror.set_column(2, &(-r.column(2)));
        assert!(nearest_rotation(&mirror).1);
    }

    proptest! {
        #[test]
        fn matrix_is_orthonormal_and_inverts(x in -3.0..3.0f64, y in -3.0..3.0f64, z in -3.0..3.0f64) {
            let w = Vector3::new(x, y, z);
            prop_assume!(w.norm() < std::f64::consts::PI - 1e-3);
            let r = rodrigues(&w);
            prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-10);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-10);
            let back = rodrigues_from_matrix(&r);
            prop_assert!((back - w).norm() < 1e-9);
            prop_assert!((angle_between(&Matrix3::identity(), &r) - w.norm()).abs() < 1e-9);
        }
    }
}
