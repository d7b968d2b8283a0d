//! Forward projection of board points into raw-image pixels.
//!
//! Pipeline for one board point seen through micro-lens `(i, j)`:
//!
//! 1. rigid motion into the camera frame, `X_c = R X_w + t`;
//! 2. ideal u-v position of the lens, `(k_u i + u_0, k_v j + v_0)`;
//! 3. radial distortion of that position on the u-v plane;
//! 4. intersection of the line through `X_c` and the distorted lens position
//!    with the x-y plane;
//! 5. radial distortion on the x-y plane;
//! 6. division by the x-y scale to land in pixels.
//!
//! The camera model is the metric TPP obtained from the decode-relative
//! calibration parameters and the decode setting.

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rotation::rodrigues;
use crate::scalar::{lit, Real};
use crate::tpp::Tpp;

/// Projection is undefined when the point lies on the u-v plane.
pub const BEHIND_PLANE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("point lies on the u-v plane (Z_c = f); projection undefined")]
    BehindPlane,
    #[error("distortion is not invertible at this radius")]
    NonInvertible,
    #[error("observation references missing {kind} {id}")]
    MissingReference { kind: &'static str, id: usize },
}

/// Radial distortion on both planes: `(s1, s2)` about `(x_c, y_c)` on the x-y
/// plane and `(t1, t2)` about `(u_c, v_c)` on the u-v plane.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Distortion<T> {
    pub s1: T,
    pub s2: T,
    pub t1: T,
    pub t2: T,
    pub x_c: T,
    pub y_c: T,
    pub u_c: T,
    pub v_c: T,
}

impl<T: Real> Distortion<T> {
    pub fn none() -> Self {
        let z = T::zero();
        Self { s1: z, s2: z, t1: z, t2: z, x_c: z, y_c: z, u_c: z, v_c: z }
    }

    pub fn is_zero(&self) -> bool {
        [self.s1, self.s2, self.t1, self.t2].iter().all(|c| *c == T::zero())
    }
}

/// Board pose: Rodrigues rotation and translation, `X_c = R X_w + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidPose<T: nalgebra::Scalar> {
    pub rotation: Vector3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> RigidPose<T> {
    pub fn identity() -> Self {
        Self { rotation: Vector3::zeros(), translation: Vector3::zeros() }
    }

    pub fn transform(&self, p: &Point3<T>) -> Point3<T> {
        Point3::from(rodrigues(&self.rotation) * p.coords + self.translation)
    }
}

/// One detected projection of a board point behind a micro-lens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub pose_id: usize,
    pub point_id: usize,
    pub lens_i: i64,
    pub lens_j: i64,
    pub px: f64,
    pub py: f64,
}

impl Observation {
    fn order_key(&self) -> (usize, usize, i64, i64) {
        (self.pose_id, self.point_id, self.lens_i, self.lens_j)
    }
}

/// Sort observations into the canonical `(pose, point, lens)` order.
pub fn sort_observations(obs: &mut [Observation]) {
    obs.sort_by(|a, b| {
        a.order_key()
            .cmp(&b.order_key())
            .then(a.px.total_cmp(&b.px))
            .then(a.py.total_cmp(&b.py))
    });
}

/// Radial distortion of a plane point about `center`.
pub fn apply_distortion<T: Real>(point: (T, T), center: (T, T), coeffs: (T, T)) -> (T, T) {
    let da = point.0 - center.0;
    let db = point.1 - center.1;
    let r2 = da * da + db * db;
    let gain = T::one() + coeffs.0 * r2 + coeffs.1 * r2 * r2;
    (da * gain + center.0, db * gain + center.1)
}

/// Invert [`apply_distortion`] by Newton iteration on the radius.
pub fn undistort(point_d: (f64, f64), center: (f64, f64), coeffs: (f64, f64)) -> Result<(f64, f64), ProjectionError> {
    let (d1, d2) = coeffs;
    if d1 == 0.0 && d2 == 0.0 {
        return Ok(point_d);
    }
    let da = point_d.0 - center.0;
    let db = point_d.1 - center.1;
    let rd = da.hypot(db);
    if rd == 0.0 {
        return Ok(point_d);
    }
    let profile = |r: f64| r * (1.0 + d1 * r * r + d2 * r.powi(4));
    let slope = |r: f64| 1.0 + 3.0 * d1 * r * r + 5.0 * d2 * r.powi(4);

    let mut r = rd;
    let mut converged = false;
    for _ in 0..50 {
        let g = slope(r);
        if !(g > 0.0) {
            return Err(ProjectionError::NonInvertible);
        }
        let step = (profile(r) - rd) / g;
        r -= step;
        if !r.is_finite() || r < 0.0 {
            return Err(ProjectionError::NonInvertible);
        }
        if step.abs() <= 1e-15 * rd.max(1.0) {
            converged = true;
            break;
        }
    }
    // monotone up to the root: the inverse is unique
    if !converged || slope(r) <= 0.0 || (profile(r) - rd).abs() > 1e-9 * rd.max(1.0) {
        return Err(ProjectionError::NonInvertible);
    }
    let s = r / rd;
    Ok((center.0 + da * s, center.1 + db * s))
}

/// Project a camera-frame point through lens `(i, j)` of the metric camera
/// model `camera`, returning raw-image pixel coordinates.
pub fn project_camera_point<T: Real>(
    point_c: &Point3<T>,
    camera: &Tpp<T>,
    dist: &Distortion<T>,
    lens: (i64, i64),
) -> Result<(T, T), ProjectionError> {
    let f = camera.f;
    let denom = point_c.z - f;
    if denom.abs() <= lit::<T>(BEHIND_PLANE_TOLERANCE) * f.abs().max(T::one()) {
        return Err(ProjectionError::BehindPlane);
    }
    let u = camera.k_u * lit::<T>(lens.0 as f64) + camera.u_0;
    let v = camera.k_v * lit::<T>(lens.1 as f64) + camera.v_0;
    let (ud, vd) = apply_distortion((u, v), (dist.u_c, dist.v_c), (dist.t1, dist.t2));
    let x = (ud * point_c.z - f * point_c.x) / denom;
    let y = (vd * point_c.z - f * point_c.y) / denom;
    let (xd, yd) = apply_distortion((x, y), (dist.x_c, dist.y_c), (dist.s1, dist.s2));
    Ok((xd / camera.k_x, yd / camera.k_y))
}

/// Predicted pixel of board point `point_w` under `pose`, for decode-relative
/// parameters `tpp` estimated against `setting`.
pub fn project_point<T: Real>(
    point_w: &Point3<T>,
    pose: &RigidPose<T>,
    tpp: &Tpp<T>,
    setting: &Tpp<T>,
    dist: &Distortion<T>,
    lens: (i64, i64),
) -> Result<(T, T), ProjectionError> {
    let camera = tpp.camera_from_decode(setting);
    project_camera_point(&pose.transform(point_w), &camera, dist, lens)
}

/// Stacked re-projection residuals (observed minus predicted) in canonical
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct Residuals {
    /// Observations in the order of `values`.
    pub observations: Vec<Observation>,
    pub values: Vec<(f64, f64)>,
    /// RMS over all `2N` components.
    pub rms: f64,
}

pub fn residuals(
    observations: &[Observation],
    board_points: &[Point3<f64>],
    poses: &HashMap<usize, RigidPose<f64>>,
    tpp: &Tpp<f64>,
    setting: &Tpp<f64>,
    dist: &Distortion<f64>,
) -> Result<Residuals, ProjectionError> {
    let mut obs = observations.to_vec();
    sort_observations(&mut obs);
    let camera = tpp.camera_from_decode(setting);
    let mut values = Vec::with_capacity(obs.len());
    let mut sum_sq = 0.0;
    for o in &obs {
        let pose = poses
            .get(&o.pose_id)
            .ok_or(ProjectionError::MissingReference { kind: "pose", id: o.pose_id })?;
        let point = board_points
            .get(o.point_id)
            .ok_or(ProjectionError::MissingReference { kind: "board point", id: o.point_id })?;
        let (x, y) = project_camera_point(&pose.transform(point), &camera, dist, (o.lens_i, o.lens_j))?;
        let r = (o.px - x, o.py - y);
        sum_sq += r.0 * r.0 + r.1 * r.1;
        values.push(r);
    }
    let rms = if obs.is_empty() { 0.0 } else { (sum_sq / (2 * obs.len()) as f64).sqrt() };
    Ok(Residuals { observations: obs, values, rms })
}
