//! Ray-to-board homography: the 4×3 map from board coordinates
//! `(X_w, Y_w, 1)` to the homogeneous points reconstructed from decoded rays.

use nalgebra::{DMatrix, Matrix3, Matrix4, Matrix4x3, Point3, RowVector3};

use super::CalibrationError;
use crate::tpp::{incidence_rows, triangulate, Ray4};

/// 4×3 homography, unit Frobenius norm, `h_43 > 0`.
pub type Homography = Matrix4x3<f64>;

/// Smallest accepted ratio of the second to the first singular value of the
/// centred board coordinates.
pub const COLLINEAR_RATIO: f64 = 1e-8;

/// Minimum number of board points per homography.
pub const MIN_POINTS: usize = 6;

/// One board point with every decoded ray that sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct PointRays {
    pub board: (f64, f64),
    pub rays: Vec<Ray4<f64>>,
}

/// Similarity on the board plane: zero mean, RMS distance √2.
fn board_normalization(points: &[PointRays]) -> Result<Matrix3<f64>, CalibrationError> {
    let n = points.len() as f64;
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |acc, p| (acc.0 + p.board.0, acc.1 + p.board.1));
    let (mx, my) = (mx / n, my / n);

    let mut centred = DMatrix::<f64>::zeros(points.len(), 2);
    for (k, p) in points.iter().enumerate() {
        centred[(k, 0)] = p.board.0 - mx;
        centred[(k, 1)] = p.board.1 - my;
    }
    let sv = centred.singular_values();
    let (s1, s2) = (sv.max(), sv.min());
    if !(s1 > 0.0) || s2 < s1 * COLLINEAR_RATIO {
        return Err(CalibrationError::DegenerateBoard);
    }
    let rms = (centred.norm_squared() / n).sqrt();
    let s = std::f64::consts::SQRT_2 / rms;
    Ok(Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0))
}

/// Similarity in ray space built from the points the rays triangulate to.
fn space_normalization(points: &[PointRays]) -> Matrix4<f64> {
    let centres: Vec<Point3<f64>> = points
        .iter()
        .filter_map(|p| triangulate(&p.rays).ok().map(|t| t.point))
        .filter(|p| p.coords.iter().all(|c| c.is_finite()))
        .collect();
    if centres.len() < 2 {
        return Matrix4::identity();
    }
    let n = centres.len() as f64;
    let mean = centres.iter().fold(nalgebra::Vector3::zeros(), |acc, p| acc + p.coords) / n;
    let rms = (centres.iter().map(|p| (p.coords - mean).norm_squared()).sum::<f64>() / n).sqrt();
    if !(rms > 0.0) {
        return Matrix4::identity();
    }
    let s = 3f64.sqrt() / rms;
    let mut t = Matrix4::identity() * s;
    t[(3, 3)] = 1.0;
    for r in 0..3 {
        t[(r, 3)] = -s * mean[r];
    }
    t
}

/// Estimate the homography from at least [`MIN_POINTS`] board points, each
/// seen by at least two rays.
///
/// Rows `M_i ⊗ (X_w, Y_w, 1)` are stacked after normalizing both the board
/// plane and ray space, and the null vector is taken from the SVD.
pub fn estimate_homography(points: &[PointRays]) -> Result<Homography, CalibrationError> {
    if points.len() < MIN_POINTS {
        return Err(CalibrationError::InsufficientData(format!(
            "{} board points, need at least {MIN_POINTS}",
            points.len()
        )));
    }
    if let Some(p) = points.iter().find(|p| p.rays.len() < 2) {
        return Err(CalibrationError::InsufficientData(format!(
            "board point ({}, {}) has {} ray(s), need at least 2",
            p.board.0,
            p.board.1,
            p.rays.len()
        )));
    }
    let n_board = board_normalization(points)?;
    let t_space = space_normalization(points);
    let t_inv = t_space.try_inverse().ok_or(CalibrationError::DegenerateBoard)?;

    let rows: usize = points.iter().map(|p| 2 * p.rays.len()).sum();
    let mut a = DMatrix::<f64>::zeros(rows, 12);
    let mut row = 0;
    for p in points {
        let w = n_board * nalgebra::Vector3::new(p.board.0, p.board.1, 1.0);
        for ray in &p.rays {
            let m = incidence_rows(ray) * t_inv;
            for r in 0..2 {
                let norm = m.row(r).norm();
                let scale = if norm > 0.0 { 1.0 / norm } else { 1.0 };
                for i in 0..4 {
                    for j in 0..3 {
                        a[(row, 3 * i + j)] = m[(r, i)] * w[j] * scale;
                    }
                }
                row += 1;
            }
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(CalibrationError::DegenerateBoard)?;
    let k = svd.singular_values.imin();
    let h_tilde = Matrix4x3::from_fn(|i, j| v_t[(k, 3 * i + j)]);
    let h = t_inv * h_tilde * n_board;
    Ok(normalize_homography(h))
}

/// Unit Frobenius norm with `h_43 > 0`.
pub fn normalize_homography(h: Homography) -> Homography {
    let h = h / h.norm();
    if h[(3, 2)] < 0.0 {
        -h
    } else {
        h
    }
}

/// RMS of the algebraic residual `M_i H (X_w, Y_w, 1)ᵀ` over all rays, with
/// each incidence row scaled to unit length over its first three entries.
pub fn algebraic_residual(h: &Homography, points: &[PointRays]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in points {
        let x = h * nalgebra::Vector3::new(p.board.0, p.board.1, 1.0);
        if x[3] == 0.0 {
            return f64::INFINITY;
        }
        let x = x / x[3];
        for ray in &p.rays {
            let m = incidence_rows(ray);
            for r in 0..2 {
                let scale = RowVector3::new(m[(r, 0)], m[(r, 1)], m[(r, 2)]).norm();
                let e = (m.row(r) * x)[0] / scale;
                sum += e * e;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

/// Cosine similarity between two homographies seen as 12-vectors, insensitive
/// to sign.
pub fn homography_similarity(a: &Homography, b: &Homography) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::rodrigues;
    use crate::tpp::{projective_matrix, transform_point, Tpp};
    use nalgebra::{Vector3, Vector4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn decode_params() -> Tpp<f64> {
        Tpp::isotropic(0.45, 0.4, 215.0, 140.0, 366.7, 2164.0)
    }

    /// Rays through the reconstructed point `x_d` that hit the u-v plane at a
    /// few lens positions.
    fn bundle(x_d: &Point3<f64>, f_prime: f64, rng: &mut ChaCha8Rng, n: usize) -> Vec<Ray4<f64>> {
        (0..n)
            .map(|_| {
                let uv = Point3::new(
                    x_d.x + rng.random_range(-300.0..300.0),
                    x_d.y + rng.random_range(-300.0..300.0),
                    f_prime,
                );
                Ray4::through(x_d, &uv, f_prime)
            })
            .collect()
    }

    fn synthetic(rot: Vector3<f64>, t: Vector3<f64>, seed: u64) -> (Homography, Vec<PointRays>) {
        let params = decode_params();
        let p = projective_matrix(&params).unwrap();
        let r = rodrigues(&rot);
        let mut rt = Matrix4x3::zeros();
        rt.fixed_view_mut::<3, 1>(0, 0).copy_from(&r.column(0));
        rt.fixed_view_mut::<3, 1>(0, 1).copy_from(&r.column(1));
        rt.fixed_view_mut::<3, 1>(0, 2).copy_from(&t);
        rt[(3, 2)] = 1.0;
        let h0 = normalize_homography(p * rt);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::new();
        for gx in 0..5 {
            for gy in 0..5 {
                let (xw, yw) = (gx as f64 * 6000.0, gy as f64 * 6000.0);
                let xc = Point3::from(r * Vector3::new(xw, yw, 0.0) + t);
                let xd = transform_point(&p, &xc).unwrap();
                points.push(PointRays { board: (xw, yw), rays: bundle(&xd, params.f_prime, &mut rng, 12) });
            }
        }
        (h0, points)
    }

    #[test]
    fn recovers_constructed_homography() {
        let (h0, points) = synthetic(Vector3::new(0.2, -0.3, 0.1), Vector3::new(-12000.0, -9000.0, 75000.0), 3);
        let h = estimate_homography(&points).unwrap();
        assert!(homography_similarity(&h, &h0) > 1.0 - 1e-10);
        assert!(h[(3, 2)] > 0.0);
        assert!((h.norm() - 1.0).abs() < 1e-12);
        let via_point = h * Vector3::new(6000.0, 12000.0, 1.0);
        let direct = h0 * Vector3::new(6000.0, 12000.0, 1.0);
        let ratio = via_point[3] / direct[3];
        assert!((via_point - direct * ratio).norm() < 1e-9 * via_point.norm());
        assert!(algebraic_residual(&h, &points) < 1e-6);
    }

    #[test]
    fn collinear_board_is_degenerate() {
        let (_, mut points) = synthetic(Vector3::new(0.1, 0.2, 0.0), Vector3::new(0.0, 0.0, 70000.0), 5);
        points.retain(|p| p.board.1 == 6000.0);
        points.extend(points.clone());
        assert_eq!(estimate_homography(&points), Err(CalibrationError::DegenerateBoard));
    }

    #[test]
    fn too_few_points_or_rays() {
        let (_, points) = synthetic(Vector3::zeros(), Vector3::new(0.0, 0.0, 70000.0), 1);
        assert!(matches!(estimate_homography(&points[..5]), Err(CalibrationError::InsufficientData(_))));
        let mut thin = points.clone();
        thin[3].rays.truncate(1);
        assert!(matches!(estimate_homography(&thin), Err(CalibrationError::InsufficientData(_))));
    }

    #[test]
    fn residual_grows_with_ray_noise() {
        let (_, points) = synthetic(Vector3::new(-0.2, 0.25, 0.3), Vector3::new(-10000.0, -10000.0, 65000.0), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let draws: Vec<Vec<Vector4<f64>>> = points
            .iter()
            .map(|p| {
                p.rays
                    .iter()
                    .map(|_| Vector4::from_fn(|_, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)))
                    .collect()
            })
            .collect();
        let residual_at = |sigma: f64| {
            let noisy: Vec<PointRays> = points
                .iter()
                .zip(&draws)
                .map(|(p, d)| PointRays {
                    board: p.board,
                    rays: p
                        .rays
                        .iter()
                        .zip(d)
                        .map(|(r, n)| Ray4::new(r.x + sigma * n[0], r.y + sigma * n[1], r.u, r.v, r.f))
                        .collect(),
                })
                .collect();
            let h = estimate_homography(&noisy).unwrap();
            algebraic_residual(&h, &noisy)
        };
        let sigmas = [0.1, 0.3, 0.5, 0.8];
        let res: Vec<f64> = sigmas.iter().map(|s| residual_at(*s)).collect();
        for w in res.windows(2) {
            assert!(w[1] > w[0]);
        }
        // linear in sigma: residual / sigma is roughly constant
        let ratios: Vec<f64> = res.iter().zip(&sigmas).map(|(r, s)| r / s).collect();
        let (lo, hi) = ratios.iter().fold((f64::MAX, 0.0f64), |a, r| (a.0.min(*r), a.1.max(*r)));
        assert!(hi / lo < 1.1, "{ratios:?}");
    }
}
