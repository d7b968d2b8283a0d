//! Closed-form intrinsics from the homographies of several board poses, and
//! per-pose extrinsics.

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::homography::Homography;
use super::CalibrationError;
use crate::projection::RigidPose;
use crate::tpp::{projective_matrix, Tpp};
use crate::rotation::{nearest_rotation, rodrigues_from_matrix};

/// Minimum number of poses for the linear stage.
pub const MIN_POSES: usize = 3;

/// Largest accepted ratio of the second- to the third-smallest singular value
/// of the stacked Q system (its null space is two-dimensional, see
/// [`solve_q`]).
pub const Q_NULLITY_RATIO: f64 = 0.5;

/// Smallest accepted ratio of the third-smallest to the largest singular
/// value of the (column-equilibrated) Q system; below it the poses do not
/// constrain Q.
pub const Q_RANK_RATIO: f64 = 1e-7;

/// Smallest accepted angle between the board planes of the two most
/// different poses. With exact data any tilt determines `Q`, so the singular
/// values alone cannot flag poses that are nearly parallel.
pub const MIN_NORMAL_SPREAD: f64 = 2.0 * std::f64::consts::PI / 180.0;

/// The six distinct non-zero entries of `Q = P⁻ᵀP⁻¹` (up to scale) and the
/// scale `λ` with `λ q = q̂`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QSolution {
    pub q11: f64,
    pub q13: f64,
    pub q23: f64,
    pub q33: f64,
    pub q34: f64,
    pub q44: f64,
    pub lambda: f64,
}

impl QSolution {
    pub fn as_array(&self) -> [f64; 6] {
        [self.q11, self.q13, self.q23, self.q33, self.q34, self.q44]
    }

    /// Symmetric 4×4 matrix holding the estimated entries.
    pub fn matrix(&self) -> Matrix4<f64> {
        Matrix4::new(
            self.q11, 0.0, self.q13, 0.0,
            0.0, self.q11, self.q23, 0.0,
            self.q13, self.q23, self.q33, self.q34,
            0.0, 0.0, self.q34, self.q44,
        )
    }
}

/// The two constraint rows `h_1ᵀQh_2 = 0` and `h_1ᵀQh_1 − h_2ᵀQh_2 = 0`.
pub fn q_constraint_rows(h: &Homography) -> [[f64; 6]; 2] {
    let e = |r: usize, c: usize| h[(r - 1, c - 1)];
    let orth = [
        e(1, 1) * e(1, 2) + e(2, 1) * e(2, 2),
        e(1, 1) * e(3, 2) + e(1, 2) * e(3, 1),
        e(2, 1) * e(3, 2) + e(2, 2) * e(3, 1),
        e(3, 1) * e(3, 2),
        e(3, 1) * e(4, 2) + e(3, 2) * e(4, 1),
        e(4, 1) * e(4, 2),
    ];
    let norm = [
        e(1, 1).powi(2) - e(1, 2).powi(2) + e(2, 1).powi(2) - e(2, 2).powi(2),
        2.0 * (e(1, 1) * e(3, 1) - e(1, 2) * e(3, 2)),
        2.0 * (e(2, 1) * e(3, 1) - e(2, 2) * e(3, 2)),
        e(3, 1).powi(2) - e(3, 2).powi(2),
        2.0 * (e(3, 1) * e(4, 1) - e(3, 2) * e(4, 2)),
        e(4, 1).powi(2) - e(4, 2).powi(2),
    ];
    [orth, norm]
}

/// Ratio `ρ = (k_x − k_u) / (f' k_x)` of the last two rows of `P`, read off
/// the first two homography columns, where `h_4i = ρ h_3i`.
pub fn pole_ratio(homographies: &[Homography]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for h in homographies {
        for c in 0..2 {
            num += h[(3, c)] * h[(2, c)];
            den += h[(2, c)] * h[(2, c)];
        }
    }
    num / den
}

/// Solve the stacked constraints of all homographies for `q̂` and `λ`.
///
/// The orthogonality rows alone leave `q_33, q_34, q_44` tied by a single
/// equation, so two more facts are used. First, `q_34 = −ρ q_44` with `ρ`
/// from [`pole_ratio`]. Second, the rows only see `P⁻¹h_1` and `P⁻¹h_2`,
/// whose fourth entries vanish, so `P⁻ᵀe_4e_4ᵀP⁻¹` stays in the null space
/// and `Q` is fixed only up to the scale of the scene. That null space is
/// split into its part with `q_44 = 0` and its part with `q_11 = 0`, and
/// their ratio is set from the metric board through
/// `(P⁻¹h_3)_4 / ‖P⁻¹h_1‖`.
pub fn solve_q(homographies: &[Homography], f_prime: f64) -> Result<QSolution, CalibrationError> {
    if homographies.len() < MIN_POSES {
        return Err(CalibrationError::InsufficientPoses(homographies.len()));
    }
    let rho = pole_ratio(homographies);
    if !rho.is_finite() {
        return Err(ill("degenerate constraint system"));
    }
    // unknowns (q11, q13, q23, q33, q44) with q34 = −ρ q44
    let mut a = DMatrix::<f64>::zeros(2 * homographies.len(), 5);
    for (k, h) in homographies.iter().enumerate() {
        for (r, row) in q_constraint_rows(h).iter().enumerate() {
            let reduced = [row[0], row[1], row[2], row[3], row[5] - rho * row[4]];
            for (c, value) in reduced.iter().enumerate() {
                a[(2 * k + r, c)] = *value;
            }
        }
    }
    let mut col_scale = [1.0; 5];
    for (c, scale) in col_scale.iter_mut().enumerate() {
        let n = a.column(c).norm();
        if n > 0.0 {
            *scale = n;
            a.column_mut(c).unscale_mut(n);
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(ill("degenerate constraint system"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    if order.len() < 5 {
        return Err(ill("degenerate constraint system"));
    }
    let sv = |k: usize| svd.singular_values[order[k]];
    let nullity = if sv(2) > 0.0 { sv(1) / sv(2) } else { f64::INFINITY };
    if nullity > Q_NULLITY_RATIO {
        return Err(ill(&format!("null space is not two-dimensional (ratio {nullity:.3e})")));
    }
    if !(sv(4) > 0.0) || sv(2) < sv(4) * Q_RANK_RATIO {
        return Err(ill(&format!("rank ratio {:.3e}", sv(2) / sv(4))));
    }

    let basis = |k: usize| -> [f64; 6] {
        let v: [f64; 5] = std::array::from_fn(|c| v_t[(order[k], c)] / col_scale[c]);
        [v[0], v[1], v[2], v[3], -rho * v[4], v[4]]
    };
    let (n1, n2) = (basis(0), basis(1));
    let combine = |a: f64, b: f64| -> [f64; 6] { std::array::from_fn(|c| a * n1[c] + b * n2[c]) };
    // the scene-metric part has no q44, the pole part no q11
    let mut metric = combine(n2[5], -n1[5]);
    let mut pole = combine(n2[0], -n1[0]);
    metric[4] = 0.0;
    metric[5] = 0.0;
    pole[..3].fill(0.0);
    pole[4] = -rho * pole[5];
    let unit = |v: &mut [f64; 6]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        n
    };
    if !(unit(&mut metric) > 0.0) || !(unit(&mut pole) > 0.0) {
        return Err(ill("degenerate constraint system"));
    }
    if metric[0] < 0.0 {
        metric.iter_mut().for_each(|v| *v = -*v);
    }
    if pole[5] < 0.0 {
        pole.iter_mut().for_each(|v| *v = -*v);
    }

    let mut beta = 1.0;
    for _ in 0..2 {
        let q = with_lambda(std::array::from_fn(|c| metric[c] + beta * pole[c]), f_prime);
        let intr = closed_form_intrinsics(&q, f_prime)?;
        let s = scene_scale(homographies, &intr, f_prime)?;
        beta /= s * s;
    }
    let q = with_lambda(std::array::from_fn(|c| metric[c] + beta * pole[c]), f_prime);
    let spread = normal_spread(homographies, &closed_form_intrinsics(&q, f_prime)?, f_prime)?;
    if spread < MIN_NORMAL_SPREAD {
        return Err(ill(&format!(
            "board normals span only {:.3}°, need {:.1}°",
            spread.to_degrees(),
            MIN_NORMAL_SPREAD.to_degrees()
        )));
    }
    Ok(q)
}

fn ill(detail: &str) -> CalibrationError {
    CalibrationError::IllConditioned(detail.to_string())
}

/// Largest angle between the board normals of any two poses.
fn normal_spread(homographies: &[Homography], intr: &Intrinsics, f_prime: f64) -> Result<f64, CalibrationError> {
    let params = Tpp::isotropic(intr.k_xy, intr.k_uv, intr.u_0, intr.v_0, f_prime, intr.f);
    let p_inv = projective_matrix(&params)?
        .try_inverse()
        .ok_or(CalibrationError::SingularProjective)?;
    let normals: Vec<Vector3<f64>> = homographies
        .iter()
        .map(|h| {
            let head = |k: usize| {
                let v = p_inv * h.column(k);
                Vector3::new(v[0], v[1], v[2])
            };
            head(0).cross(&head(1)).normalize()
        })
        .collect();
    let mut spread: f64 = 0.0;
    for (i, a) in normals.iter().enumerate() {
        for b in &normals[i + 1..] {
            spread = spread.max(a.dot(b).clamp(-1.0, 1.0).acos());
        }
    }
    Ok(spread)
}

fn with_lambda(q: [f64; 6], f_prime: f64) -> QSolution {
    let [q11, q13, q23, q33, q34, q44] = q;
    let lambda = f_prime * f_prime / q11
        * ((q33 * q44 - q34 * q34) - q44 / q11 * (q13 * q13 + q23 * q23));
    QSolution { q11, q13, q23, q33, q34, q44, lambda }
}

/// Scale of the scene implied by `intr` relative to the metric board:
/// geometric mean of `(P⁻¹h_3)_4 / ‖(P⁻¹h_k)_{1..3}‖` for `k = 1, 2`.
fn scene_scale(homographies: &[Homography], intr: &Intrinsics, f_prime: f64) -> Result<f64, CalibrationError> {
    let params = Tpp::isotropic(intr.k_xy, intr.k_uv, intr.u_0, intr.v_0, f_prime, intr.f);
    let p_inv = projective_matrix(&params)?
        .try_inverse()
        .ok_or(CalibrationError::SingularProjective)?;
    let mut log_sum = 0.0;
    let mut count = 0;
    for h in homographies {
        let a: [Vector4<f64>; 3] = std::array::from_fn(|k| p_inv * h.column(k));
        let w = a[2][3].abs();
        for v in &a[..2] {
            let n = Vector3::new(v[0], v[1], v[2]).norm();
            if n > 0.0 && w > 0.0 {
                log_sum += (w / n).ln();
                count += 1;
            }
        }
    }
    let s = (log_sum / count.max(1) as f64).exp();
    if count == 0 || !s.is_finite() {
        return Err(CalibrationError::SingularProjective);
    }
    Ok(s)
}

/// Decode-relative intrinsics `(k_xy, k_uv, u_0, v_0, f)` recovered from `q̂`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub k_xy: f64,
    pub k_uv: f64,
    pub u_0: f64,
    pub v_0: f64,
    pub f: f64,
}

pub fn closed_form_intrinsics(q: &QSolution, f_prime: f64) -> Result<Intrinsics, CalibrationError> {
    let QSolution { q11, q13, q23, q34, q44, lambda, .. } = *q;
    if !(q11 > 0.0) {
        return Err(CalibrationError::NegativeDiscriminant("q11 must be positive".into()));
    }
    if !(q44 > 0.0) {
        return Err(CalibrationError::NegativeDiscriminant("q44 / q11 is not positive".into()));
    }
    if !(lambda > 0.0) {
        return Err(CalibrationError::NegativeDiscriminant("lambda is not positive".into()));
    }
    let k_xy = (q44 / q11).sqrt();
    let k_uv = k_xy * (1.0 + f_prime * q34 / q44);
    if !(k_uv > 0.0) {
        return Err(CalibrationError::NegativeDiscriminant("k_uv is not positive".into()));
    }
    let u_0 = -f_prime * q13 / q11;
    let v_0 = -f_prime * q23 / q11;
    let f = (lambda / q44).sqrt() / k_uv;
    let out = Intrinsics { k_xy, k_uv, u_0, v_0, f };
    if [out.k_xy, out.k_uv, out.u_0, out.v_0, out.f].iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(CalibrationError::NegativeDiscriminant("non-finite intrinsics".into()))
    }
}

/// A pose from the linear stage with its orthonormality diagnostic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtrinsicEstimate {
    pub pose: RigidPose<f64>,
    /// `‖RᵀR − I‖_F` of `[r1 r2 r1×r2]` before projection onto SO(3).
    pub orthonormality_error: f64,
}

/// Pose of one board from its homography and the projective matrix `P`.
pub fn extrinsics_from_homography(h: &Homography, p: &Matrix4<f64>) -> Result<ExtrinsicEstimate, CalibrationError> {
    let p_inv = p.try_inverse().ok_or(CalibrationError::SingularProjective)?;
    let a: [Vector4<f64>; 3] = std::array::from_fn(|k| p_inv * h.column(k));
    let head = |v: &Vector4<f64>| Vector3::new(v[0], v[1], v[2]);
    let sign = if a[2][3] < 0.0 { -1.0 } else { 1.0 };
    let n1 = head(&a[0]).norm();
    let n2 = head(&a[1]).norm();
    if !(n1 > 0.0) || !(n2 > 0.0) {
        return Err(CalibrationError::SingularProjective);
    }
    let r1 = head(&a[0]) * (sign / n1);
    let r2 = head(&a[1]) * (sign / n2);
    let r3 = r1.cross(&r2);
    let t = head(&a[2]) * (sign / n1);
    let assembled = Matrix3::from_columns(&[r1, r2, r3]);
    let orthonormality_error = (assembled.transpose() * assembled - Matrix3::identity()).norm();
    let (rotation, reflected) = nearest_rotation(&assembled);
    if reflected {
        return Err(CalibrationError::ReflectionDetected);
    }
    Ok(ExtrinsicEstimate {
        pose: RigidPose { rotation: rodrigues_from_matrix(&rotation), translation: t },
        orthonormality_error,
    })
}
