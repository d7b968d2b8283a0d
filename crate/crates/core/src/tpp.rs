//! Two-parallel-plane (TPP) ray geometry.
//!
//! A ray is stored by its intersections with two parallel planes: the x-y
//! plane at `z = 0` and the u-v plane at `z = f`. Rays that meet in a scene
//! point can be intersected linearly, and re-scaling or shifting the plane
//! coordinates moves every intersection by one 4×4 projective map.

use nalgebra::{DMatrix, DVector, Matrix2x4, Matrix4, Point3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{lit, Real};

/// Smallest accepted ratio of smallest to largest singular value in the
/// (column-equilibrated) triangulation system.
pub const DEGENERATE_RAY_RATIO: f64 = 1e-8;

/// Relative tolerance on `k_u / k_x == k_v / k_y`.
pub const SCALE_RATIO_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TppError {
    #[error("rays do not determine a point (parallel or coincident bundle)")]
    DegenerateRays,
    #[error("at least two rays are needed, got {0}")]
    TooFewRays(usize),
    #[error("invalid ray: {0}")]
    InvalidRay(String),
    #[error("invalid TPP parameters: {0}")]
    InvalidParams(String),
    #[error("projective matrix is singular")]
    SingularParams,
    #[error("point maps to the plane at infinity")]
    PointAtInfinity,
}

/// A light-field ray through `(x, y, 0)` and `(u, v, f)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ray4<T> {
    pub x: T,
    pub y: T,
    pub u: T,
    pub v: T,
    pub f: T,
}

impl<T: Real> Ray4<T> {
    pub fn new(x: T, y: T, u: T, v: T, f: T) -> Self {
        Self { x, y, u, v, f }
    }

    pub fn validate(&self) -> Result<(), TppError> {
        let all_finite = [self.x, self.y, self.u, self.v, self.f]
            .iter()
            .all(|c| c.is_finite());
        if !all_finite {
            return Err(TppError::InvalidRay("non-finite coordinate".into()));
        }
        if self.f <= T::zero() {
            return Err(TppError::InvalidRay("plane separation must be positive".into()));
        }
        Ok(())
    }

    /// Point on the ray at depth `z`.
    pub fn point_at(&self, z: T) -> Point3<T> {
        let s = z / self.f;
        Point3::new(
            self.x + (self.u - self.x) * s,
            self.y + (self.v - self.y) * s,
            z,
        )
    }

    /// Ray through two points with distinct depths, expressed with plane
    /// separation `f`.
    pub fn through(a: &Point3<T>, b: &Point3<T>, f: T) -> Self {
        let dz = b.z - a.z;
        let at = |z: T| {
            let s = (z - a.z) / dz;
            (a.x + (b.x - a.x) * s, a.y + (b.y - a.y) * s)
        };
        let (x, y) = at(T::zero());
        let (u, v) = at(f);
        Self { x, y, u, v, f }
    }
}

/// The seven TPP parameters `(k_x, k_y, k_u, k_v, u_0, v_0, f')` together with
/// the plane separation `f` of the frame they act on.
///
/// Used in three roles: as a decode setting (virtual ray -> ray), as the
/// decode-relative calibration result, and as the metric camera model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tpp<T> {
    pub k_x: T,
    pub k_y: T,
    pub k_u: T,
    pub k_v: T,
    pub u_0: T,
    pub v_0: T,
    pub f_prime: T,
    pub f: T,
}

impl<T: Real> Tpp<T> {
    /// Isotropic parameters (`k_x = k_y`, `k_u = k_v`).
    pub fn isotropic(k_xy: T, k_uv: T, u_0: T, v_0: T, f_prime: T, f: T) -> Self {
        Self {
            k_x: k_xy,
            k_y: k_xy,
            k_u: k_uv,
            k_v: k_uv,
            u_0,
            v_0,
            f_prime,
            f,
        }
    }

    /// Metric camera model: decoded rays use the same separation as the frame.
    pub fn camera(k_xy: T, k_uv: T, u_0: T, v_0: T, f: T) -> Self {
        Self::isotropic(k_xy, k_uv, u_0, v_0, f, f)
    }

    pub fn validate(&self) -> Result<(), TppError> {
        let fields = [
            self.k_x, self.k_y, self.k_u, self.k_v, self.u_0, self.v_0, self.f_prime, self.f,
        ];
        if !fields.iter().all(|c| c.is_finite()) {
            return Err(TppError::InvalidParams("non-finite parameter".into()));
        }
        let positive = [self.k_x, self.k_y, self.k_u, self.k_v, self.f_prime, self.f];
        if positive.iter().any(|c| *c <= T::zero()) {
            return Err(TppError::InvalidParams(
                "scales and plane separations must be positive".into(),
            ));
        }
        let lhs = self.k_u * self.k_y;
        let rhs = self.k_v * self.k_x;
        let scale = lhs.abs().max(rhs.abs());
        if (lhs - rhs).abs() > scale * lit(SCALE_RATIO_TOLERANCE) {
            return Err(TppError::InvalidParams("k_u/k_x must equal k_v/k_y".into()));
        }
        Ok(())
    }

    /// Re-parameterize a ray: `(k_x x, k_y y, k_u u + u_0, k_v v + v_0, f')`.
    pub fn transform_ray(&self, ray: &Ray4<T>) -> Ray4<T> {
        Ray4 {
            x: self.k_x * ray.x,
            y: self.k_y * ray.y,
            u: self.k_u * ray.u + self.u_0,
            v: self.k_v * ray.v + self.v_0,
            f: self.f_prime,
        }
    }

    /// Metric camera model implied by decode-relative parameters `self`
    /// (estimated against `setting`): ratios `k'/k` and offsets
    /// `(u'_0 - u_0) / k_u`.
    pub fn camera_from_decode(&self, setting: &Tpp<T>) -> Tpp<T> {
        Tpp {
            k_x: setting.k_x / self.k_x,
            k_y: setting.k_y / self.k_y,
            k_u: setting.k_u / self.k_u,
            k_v: setting.k_v / self.k_v,
            u_0: (setting.u_0 - self.u_0) / self.k_u,
            v_0: (setting.v_0 - self.v_0) / self.k_v,
            f_prime: self.f,
            f: self.f,
        }
    }

    /// Inverse of [`Tpp::camera_from_decode`]: the decode-relative parameters
    /// that map the camera model `self` onto the rays decoded with `setting`.
    pub fn decode_from_camera(&self, setting: &Tpp<T>) -> Tpp<T> {
        let k_u = setting.k_u / self.k_u;
        let k_v = setting.k_v / self.k_v;
        Tpp {
            k_x: setting.k_x / self.k_x,
            k_y: setting.k_y / self.k_y,
            k_u,
            k_v,
            u_0: setting.u_0 - k_u * self.u_0,
            v_0: setting.v_0 - k_v * self.v_0,
            f_prime: setting.f_prime,
            f: self.f,
        }
    }
}

/// The two incidence rows `M` of a ray: `M · (X, Y, Z, 1)ᵀ = 0` for every
/// point on it.
pub fn incidence_rows<T: Real>(ray: &Ray4<T>) -> Matrix2x4<T> {
    let z = T::zero();
    Matrix2x4::new(
        ray.f, z, ray.x - ray.u, -ray.f * ray.x,
        z, ray.f, ray.y - ray.v, -ray.f * ray.y,
    )
}

/// Least-squares intersection of a ray bundle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triangulation<T: nalgebra::Scalar> {
    pub point: Point3<T>,
    /// RMS of the algebraic residual `M · (P, 1)` over all rows.
    pub rms_residual: T,
}

/// Intersect rays by minimizing the stacked incidence residual.
///
/// The homogeneous column is moved to the right-hand side and the remaining
/// three-column system is solved by SVD after column equilibration.
pub fn triangulate<T: Real>(rays: &[Ray4<T>]) -> Result<Triangulation<T>, TppError> {
    if rays.len() < 2 {
        return Err(TppError::TooFewRays(rays.len()));
    }
    for ray in rays {
        ray.validate()?;
    }
    let rows = rays.len() * 2;
    let mut a = DMatrix::<T>::zeros(rows, 3);
    let mut b = DVector::<T>::zeros(rows);
    for (k, ray) in rays.iter().enumerate() {
        let m = incidence_rows(ray);
        for r in 0..2 {
            for c in 0..3 {
                a[(2 * k + r, c)] = m[(r, c)];
            }
            b[2 * k + r] = -m[(r, 3)];
        }
    }

    let mut col_scale = [T::one(); 3];
    for (c, scale) in col_scale.iter_mut().enumerate() {
        let n = a.column(c).norm();
        if n > T::zero() {
            *scale = n;
            a.column_mut(c).unscale_mut(n);
        }
    }

    let svd = a.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    if !(s_max > T::zero()) || s_min < s_max * lit(DEGENERATE_RAY_RATIO) {
        return Err(TppError::DegenerateRays);
    }
    let scaled = svd
        .solve(&b, T::zero())
        .map_err(|_| TppError::DegenerateRays)?;
    let residual = &a * &scaled - &b;
    let rms = (residual.norm_squared() / lit::<T>(rows as f64)).sqrt();

    Ok(Triangulation {
        point: Point3::new(
            scaled[0] / col_scale[0],
            scaled[1] / col_scale[1],
            scaled[2] / col_scale[2],
        ),
        rms_residual: rms,
    })
}

/// The projective map `P(𝒳, f)` that carries points reconstructed from rays
/// in a frame of separation `f` to the points reconstructed from the same
/// rays after re-parameterization by `params`.
///
/// Rows as derived for `k_u / k_x = k_v / k_y`; the second row's `f·k_v·k_x`
/// equals `f·k_u·k_y` under that constraint.
pub fn projective_matrix<T: Real>(params: &Tpp<T>) -> Result<Matrix4<T>, TppError> {
    params.validate()?;
    let Tpp { k_x, k_u, k_v, u_0, v_0, f_prime, f, .. } = *params;
    let z = T::zero();
    let p = Matrix4::new(
        f * k_u * k_x, z, k_x * u_0, z,
        z, f * k_v * k_x, k_x * v_0, z,
        z, z, f_prime * k_x, z,
        z, z, k_x - k_u, f * k_u,
    );
    let det = p[(0, 0)] * p[(1, 1)] * p[(2, 2)] * p[(3, 3)];
    if det == T::zero() || !det.is_finite() {
        return Err(TppError::SingularParams);
    }
    Ok(p)
}

/// Apply a homogeneous 4×4 map to a point and dehomogenize.
pub fn transform_point<T: Real>(p: &Matrix4<T>, point: &Point3<T>) -> Result<Point3<T>, TppError> {
    let h: Vector4<T> = p * point.to_homogeneous();
    if h[3].abs() < h.norm() * lit(1e-14) || h[3] == T::zero() {
        return Err(TppError::PointAtInfinity);
    }
    Ok(Point3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Decode the virtual ray `(x, y, i, j, 1)` with a parameter setting: the ray
/// through `(k_x x, k_y y, 0)` and `(k_u i + u_0, k_v j + v_0, f')`.
pub fn decode_virtual_ray<T: Real>(pixel: (T, T), lens: (i64, i64), setting: &Tpp<T>) -> Ray4<T> {
    Ray4 {
        x: setting.k_x * pixel.0,
        y: setting.k_y * pixel.1,
        u: setting.k_u * lit::<T>(lens.0 as f64) + setting.u_0,
        v: setting.k_v * lit::<T>(lens.1 as f64) + setting.v_0,
        f: setting.f_prime,
    }
}
