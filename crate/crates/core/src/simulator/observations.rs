//! Which micro-lenses see a point, and where.

use std::collections::{HashSet, VecDeque};

use nalgebra::{Matrix2, Point3, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{thin_lens_inside, Simulator};
use crate::projection::{project_camera_point, Distortion, Observation, RigidPose};
use crate::rectification::{project_center, MlaMisalignmentSpec};

/// Upper bound on lenses examined per point.
const MAX_LENSES_PER_POINT: usize = 20_000;

/// How pixels are produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Engine {
    /// Forward projection through the ground-truth camera model.
    Tpp,
    /// Pinhole micro-lenses placed by an MLA spec, traced through the thin
    /// main lens. Ignores distortion.
    Physical(MlaMisalignmentSpec),
}

impl Simulator {
    /// Ideal pixel of `point_c` (camera frame) behind `lens`.
    pub fn ideal_pixel(&self, point_c: &Point3<f64>, lens: (i64, i64)) -> Option<(f64, f64)> {
        match &self.engine {
            Engine::Tpp => project_camera_point(point_c, &self.truth.camera, &Distortion::none(), lens).ok(),
            Engine::Physical(mla) => {
                let outside = self.truth.frame.to_lens(point_c);
                let inside = thin_lens_inside(self.spec.main_focal, &outside);
                let c = mla.lens_center(lens);
                let dz = c.z - inside.z;
                if dz.abs() < 1e-12 {
                    return None;
                }
                let s = inside + (c - inside) * ((mla.sensor_z() - inside.z) / dz);
                Some(mla.to_pixel(s.x, s.y))
            }
        }
    }

    /// Center of the micro-image of `lens`, in pixels.
    pub fn micro_image_center(&self, lens: (i64, i64)) -> Option<(f64, f64)> {
        match &self.engine {
            Engine::Tpp => {
                let c = self.truth.main_lens_center();
                project_camera_point(&c, &self.truth.camera, &Distortion::none(), lens).ok()
            }
            Engine::Physical(mla) => project_center(mla, lens).ok().map(|c| c.center),
        }
    }

    pub(crate) fn sees(&self, point_c: &Point3<f64>, lens: (i64, i64)) -> Option<(f64, f64)> {
        let center = self.micro_image_center(lens)?;
        if !self.spec.contains_pixel(center) {
            return None;
        }
        let p = self.ideal_pixel(point_c, lens)?;
        let r = (p.0 - center.0).hypot(p.1 - center.1);
        (r <= self.spec.micro_image_radius).then_some(p)
    }

    /// Lens whose micro-image center the point projects closest to, from an
    /// affine fit over three lenses.
    fn seed_lens(&self, point_c: &Point3<f64>) -> Option<(i64, i64)> {
        let offset = |lens: (i64, i64)| -> Option<Vector2<f64>> {
            let p = self.ideal_pixel(point_c, lens)?;
            let c = self.micro_image_center(lens)?;
            Some(Vector2::new(p.0 - c.0, p.1 - c.1))
        };
        let d0 = offset((0, 0))?;
        let a = Matrix2::from_columns(&[offset((1, 0))? - d0, offset((0, 1))? - d0]);
        let ij = a.try_inverse()? * (-d0);
        if !ij.iter().all(|v| v.is_finite() && v.abs() < 1e9) {
            return None;
        }
        Some((ij.x.round() as i64, ij.y.round() as i64))
    }

    /// Lenses that see `point_c` with the ideal pixel, sorted by label.
    pub fn visible_lenses(&self, point_c: &Point3<f64>) -> Vec<((i64, i64), (f64, f64))> {
        let Some(seed) = self.seed_lens(point_c) else {
            return Vec::new();
        };
        let mut queue = VecDeque::new();
        let mut seen = HashSet::new();
        'seed: for r in 0..=2i64 {
            for di in -r..=r {
                for dj in -r..=r {
                    let lens = (seed.0 + di, seed.1 + dj);
                    if self.sees(point_c, lens).is_some() {
                        queue.push_back(lens);
                        seen.insert(lens);
                        break 'seed;
                    }
                }
            }
        }
        let mut out = Vec::new();
        while let Some(lens) = queue.pop_front() {
            let Some(p) = self.sees(point_c, lens) else { continue };
            out.push((lens, p));
            if seen.len() > MAX_LENSES_PER_POINT {
                break;
            }
            for (di, dj) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let next = (lens.0 + di, lens.1 + dj);
                if seen.insert(next) {
                    queue.push_back(next);
                }
            }
        }
        out.sort_by_key(|(lens, _)| *lens);
        out
    }

    /// Noise-free observations of a camera-frame point: visibility from the
    /// ideal geometry, pixels with distortion applied.
    pub fn observe(&self, point_c: &Point3<f64>, dist: &Distortion<f64>) -> Vec<((i64, i64), (f64, f64))> {
        let mut out = self.visible_lenses(point_c);
        if let Engine::Tpp = self.engine {
            if !dist.is_zero() {
                out = out
                    .into_iter()
                    .filter_map(|(lens, _)| {
                        project_camera_point(point_c, &self.truth.camera, dist, lens)
                            .ok()
                            .map(|p| (lens, p))
                    })
                    .collect();
            }
        }
        out.retain(|(_, p)| self.spec.contains_pixel(*p));
        out
    }

    /// Observations of the board under every pose, with i.i.d. Gaussian
    /// pixel noise of standard deviation `sigma`. Pose `k` gets id `k` and
    /// its own RNG stream, so the draws do not depend on `sigma`.
    pub fn synthesize_observations(
        &self,
        poses: &[RigidPose<f64>],
        dist: &Distortion<f64>,
        sigma: f64,
        seed: u64,
    ) -> Vec<Observation> {
        let points = self.calibration_board().points();
        let per_pose: Vec<Vec<Observation>> = poses
            .par_iter()
            .enumerate()
            .map(|(pose_id, pose)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(pose_id as u64);
                let mut out = Vec::new();
                for (point_id, point) in points.iter().enumerate() {
                    for ((i, j), (px, py)) in self.observe(&pose.transform(point), dist) {
                        let nx: f64 = StandardNormal.sample(&mut rng);
                        let ny: f64 = StandardNormal.sample(&mut rng);
                        out.push(Observation {
                            pose_id,
                            point_id,
                            lens_i: i,
                            lens_j: j,
                            px: px + sigma * nx,
                            py: py + sigma * ny,
                        });
                    }
                }
                out
            })
            .collect();
        let out: Vec<Observation> = per_pose.into_iter().flatten().collect();
        if out.is_empty() {
            log::warn!("simulation produced no observations");
        }
        out
    }
}
