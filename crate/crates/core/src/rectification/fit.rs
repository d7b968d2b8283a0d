//! Row slopes and the rectifying homography.

use std::collections::BTreeMap;

use image::{ImageBuffer, Luma};
use nalgebra::{DMatrix, Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{MicroImageCenter, RectificationError};
use crate::projection::Observation;

/// Rows with fewer centers are skipped by [`row_slopes`].
pub const MIN_ROW_CENTERS: usize = 10;
const MIN_HOMOGRAPHY_CENTERS: usize = 5;
const RANK_RATIO: f64 = 1e-12;

/// Per-row total-least-squares line fits: `(row label j, slope dy/dx)`.
pub fn row_slopes(centers: &[MicroImageCenter]) -> Result<Vec<(i64, f64)>, RectificationError> {
    let mut rows: BTreeMap<i64, Vec<Vector2<f64>>> = BTreeMap::new();
    for c in centers {
        rows.entry(c.label.1).or_default().push(Vector2::new(c.center.0, c.center.1));
    }
    let slopes: Vec<(i64, f64)> = rows
        .into_iter()
        .filter(|(_, pts)| pts.len() >= MIN_ROW_CENTERS)
        .map(|(j, pts)| {
            let n = pts.len() as f64;
            let mean = pts.iter().sum::<Vector2<f64>>() / n;
            let mut cov = Matrix2::zeros();
            for p in &pts {
                let d = p - mean;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let k = if eig.eigenvalues[0] >= eig.eigenvalues[1] { 0 } else { 1 };
            let dir = eig.eigenvectors.column(k);
            (j, dir[1] / dir[0])
        })
        .collect();
    if slopes.len() < 2 {
        return Err(RectificationError::TooFewCenters(format!(
            "need 2 rows with {MIN_ROW_CENTERS} centers, found {}",
            slopes.len()
        )));
    }
    Ok(slopes)
}

/// `max - min` over row slopes.
pub fn slope_range(slopes: &[(i64, f64)]) -> f64 {
    let max = slopes.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let min = slopes.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    max - min
}

/// Homography taking detected centers to the uniform grid
/// `origin + (i·pitch, j·pitch)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectifyingHomography {
    /// Row-major, `h33 = 1`.
    pub matrix: Matrix3<f64>,
    pub pitch: f64,
    pub origin: (f64, f64),
    /// RMS distance of mapped centers to their grid positions, pixels.
    pub rms: f64,
}

/// Map a pixel through `h`. `None` on the line at infinity.
pub fn apply_homography(h: &Matrix3<f64>, p: (f64, f64)) -> Option<(f64, f64)> {
    let q = h * Vector3::new(p.0, p.1, 1.0);
    let scale = h.abs().max() * (1.0 + p.0.abs() + p.1.abs());
    if q.z.abs() <= 1e-14 * scale {
        return None;
    }
    Some((q.x / q.z, q.y / q.z))
}

/// Similarity moving `points` to zero mean and RMS distance √2.
fn normalization(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector2<f64>>() / n;
    let rms = (points.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / n).sqrt();
    let s = if rms > 0.0 { std::f64::consts::SQRT_2 / rms } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
}

fn transform(t: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = t * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Normalized direct linear transform from `src` to `dst`.
fn dlt(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Result<Matrix3<f64>, RectificationError> {
    let (ts, td) = (normalization(src), normalization(dst));
    let mut ata = DMatrix::<f64>::zeros(9, 9);
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (transform(&ts, s), transform(&td, d));
        let rows = [
            [a.x, a.y, 1.0, 0.0, 0.0, 0.0, -b.x * a.x, -b.x * a.y, -b.x],
            [0.0, 0.0, 0.0, a.x, a.y, 1.0, -b.y * a.x, -b.y * a.y, -b.y],
        ];
        for r in rows {
            for i in 0..9 {
                for j in 0..9 {
                    ata[(i, j)] += r[i] * r[j];
                }
            }
        }
    }
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let largest = eig.eigenvalues[order[8]];
    if eig.eigenvalues[order[1]] <= RANK_RATIO * largest {
        return Err(RectificationError::DegenerateConfiguration("rank-deficient DLT system".into()));
    }
    let v = eig.eigenvectors.column(order[0]);
    let hn = Matrix3::from_row_slice(v.as_slice());
    let td_inv = td.try_inverse().expect("similarity is invertible");
    let h = td_inv * hn * ts;
    if h[(2, 2)].abs() <= 1e-12 * h.abs().max() {
        return Err(RectificationError::DegenerateConfiguration("h33 vanishes".into()));
    }
    Ok(h / h[(2, 2)])
}

/// Fit the homography mapping labeled centers onto a uniform square grid.
///
/// The grid pitch is `pitch` if given, otherwise the least-squares fit of
/// `c ≈ o + p·(i, j)` over all centers. The origin `o` is the mean offset of
/// the centers from `(i·p, j·p)`.
pub fn estimate_rectifying_homography(
    centers: &[MicroImageCenter],
    pitch: Option<f64>,
) -> Result<RectifyingHomography, RectificationError> {
    if centers.len() < MIN_HOMOGRAPHY_CENTERS {
        return Err(RectificationError::DegenerateConfiguration(format!(
            "{} centers, need {MIN_HOMOGRAPHY_CENTERS}",
            centers.len()
        )));
    }
    let mut rows: Vec<i64> = centers.iter().map(|c| c.label.1).collect();
    let mut cols: Vec<i64> = centers.iter().map(|c| c.label.0).collect();
    rows.sort_unstable();
    rows.dedup();
    cols.sort_unstable();
    cols.dedup();
    if rows.len() < 2 || cols.len() < 2 {
        return Err(RectificationError::DegenerateConfiguration("centers span fewer than two rows or columns".into()));
    }
    let src: Vec<Vector2<f64>> = centers.iter().map(|c| Vector2::new(c.center.0, c.center.1)).collect();
    let labels: Vec<Vector2<f64>> = centers.iter().map(|c| Vector2::new(c.label.0 as f64, c.label.1 as f64)).collect();
    let n = src.len() as f64;
    let (src_mean, label_mean) = (src.iter().sum::<Vector2<f64>>() / n, labels.iter().sum::<Vector2<f64>>() / n);
    let pitch = match pitch {
        Some(p) => p,
        None => {
            let num: f64 = src.iter().zip(&labels).map(|(s, l)| (s - src_mean).dot(&(l - label_mean))).sum();
            let den: f64 = labels.iter().map(|l| (l - label_mean).norm_squared()).sum();
            num / den
        }
    };
    if !(pitch > 0.0 && pitch.is_finite()) {
        return Err(RectificationError::DegenerateConfiguration(format!("pitch {pitch}")));
    }
    let origin = src_mean - label_mean * pitch;
    let dst: Vec<Vector2<f64>> = labels.iter().map(|l| l * pitch + origin).collect();
    let matrix = dlt(&src, &dst)?;
    let mut sum = 0.0;
    for (s, d) in src.iter().zip(&dst) {
        let q = transform(&matrix, s);
        sum += (q - d).norm_squared();
    }
    Ok(RectifyingHomography {
        matrix,
        pitch,
        origin: (origin.x, origin.y),
        rms: (sum / src.len() as f64).sqrt(),
    })
}

/// Map observation pixels through `h`; lens labels are kept.
pub fn rectify_observations(obs: &[Observation], h: &Matrix3<f64>) -> Result<Vec<Observation>, RectificationError> {
    obs.iter()
        .enumerate()
        .map(|(k, o)| {
            let (px, py) = apply_homography(h, (o.px, o.py)).ok_or(RectificationError::PointAtInfinity(k))?;
            Ok(Observation { px, py, ..*o })
        })
        .collect()
}

/// Map centers through `h`; labels are kept.
pub fn map_centers(centers: &[MicroImageCenter], h: &Matrix3<f64>) -> Result<Vec<MicroImageCenter>, RectificationError> {
    centers
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let center = apply_homography(h, c.center).ok_or(RectificationError::PointAtInfinity(k))?;
            Ok(MicroImageCenter { label: c.label, center })
        })
        .collect()
}

/// Resample `image` through `h` (inverse mapping, bilinear). Pixels whose
/// source falls outside the image are black.
pub fn warp_image(
    image: &ImageBuffer<Luma<u16>, Vec<u16>>,
    h: &Matrix3<f64>,
) -> Result<ImageBuffer<Luma<u16>, Vec<u16>>, RectificationError> {
    let inv = h
        .try_inverse()
        .ok_or_else(|| RectificationError::DegenerateConfiguration("homography is singular".into()))?;
    let (w, hgt) = (image.width() as usize, image.height() as usize);
    let src = image.as_raw();
    let sample = |x: f64, y: f64| -> f64 {
        if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (hgt - 1) as f64) {
            return 0.0;
        }
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(hgt - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let at = |xx: usize, yy: usize| src[yy * w + xx] as f64;
        (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0)) + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1))
    };
    let data: Vec<u16> = (0..hgt)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).map(move |x| match apply_homography(&inv, (x as f64, y as f64)) {
                Some((sx, sy)) => sample(sx, sy).round().clamp(0.0, u16::MAX as f64) as u16,
                None => 0,
            })
        })
        .collect();
    Ok(ImageBuffer::from_raw(w as u32, hgt as u32, data).expect("buffer size matches"))
}
