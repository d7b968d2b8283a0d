//! Random board poses inside a viewing envelope.

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Simulator, SimulatorError};
use crate::projection::RigidPose;
use crate::rotation::{angle_between, rodrigues, rodrigues_from_matrix};

/// Where boards may be placed. Angles in degrees, lengths in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEnvelope {
    /// Range of the board-center distance in front of the main lens.
    pub distance: (f64, f64),
    /// Range of the tilt of the board normal away from the optical axis.
    pub tilt: (f64, f64),
    /// Largest rotation about the board normal.
    pub max_roll: f64,
    /// Largest total rotation from frontal.
    pub max_rotation: f64,
    /// Largest lateral offset `(x, y)` of the board center from the axis.
    pub lateral: (f64, f64),
    /// Smallest fraction of board points seen by at least two lenses.
    pub min_visible_fraction: f64,
    pub max_rejections: usize,
}

impl PoseEnvelope {
    pub fn reference() -> Self {
        Self {
            distance: (650.0, 850.0),
            tilt: (10.0, 35.0),
            max_roll: 10.0,
            max_rotation: 40.0,
            lateral: (20.0, 15.0),
            min_visible_fraction: 0.5,
            max_rejections: 1000,
        }
    }

    /// Frontal, centered boards at a fixed distance.
    pub fn frontal(distance: f64) -> Self {
        Self {
            distance: (distance, distance),
            tilt: (0.0, 0.0),
            max_roll: 0.0,
            max_rotation: 0.0,
            lateral: (0.0, 0.0),
            ..Self::reference()
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..=range.1)
    } else {
        range.0
    }
}

impl Simulator {
    /// Pixel where the chief ray (through the main-lens center) of a
    /// camera-frame point meets the sensor.
    pub fn chief_pixel(&self, point_c: &Point3<f64>) -> Option<(f64, f64)> {
        let c = self.truth.main_lens_center();
        let dz = c.z - point_c.z;
        if dz.abs() < 1e-12 {
            return None;
        }
        let q = point_c + (c - point_c) * (-point_c.z / dz);
        Some((q.x / self.truth.camera.k_x, q.y / self.truth.camera.k_y))
    }

    fn pose_acceptable(&self, pose: &RigidPose<f64>, envelope: &PoseEnvelope) -> bool {
        let margin = self.spec.micro_image_radius;
        let (w, h) = self.spec.sensor_resolution;
        let points = self.calibration_board().points();
        let mut visible = 0usize;
        for p in &points {
            let pc = pose.transform(p);
            if pc.z <= 2.0 * self.truth.camera.f {
                return false;
            }
            let Some((x, y)) = self.chief_pixel(&pc) else { return false };
            if x < margin || y < margin || x > w as f64 - margin || y > h as f64 - margin {
                return false;
            }
            if self.visible_lenses(&pc).len() >= 2 {
                visible += 1;
            }
        }
        visible as f64 >= envelope.min_visible_fraction * points.len() as f64
    }

    /// `n` random board poses, deterministic in `seed`. Each candidate is
    /// redrawn until it lies fully in view with enough visible points.
    pub fn generate_poses(
        &self,
        n: usize,
        seed: u64,
        envelope: &PoseEnvelope,
    ) -> Result<Vec<RigidPose<f64>>, SimulatorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let center = self.calibration_board().center();
        let mut poses = Vec::with_capacity(n);
        for pose in 0..n {
            let mut rejections = 0;
            loop {
                let tilt = uniform(&mut rng, envelope.tilt).to_radians();
                let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
                let roll = uniform(&mut rng, (-envelope.max_roll, envelope.max_roll)).to_radians();
                let distance = uniform(&mut rng, envelope.distance);
                let lx = uniform(&mut rng, (-envelope.lateral.0, envelope.lateral.0));
                let ly = uniform(&mut rng, (-envelope.lateral.1, envelope.lateral.1));

                let axis = Vector3::new(azimuth.cos(), azimuth.sin(), 0.0) * tilt;
                let r: Matrix3<f64> = rodrigues(&axis) * rodrigues(&Vector3::new(0.0, 0.0, roll));
                let target = self.truth.frame.to_camera(&Point3::new(lx, ly, -distance));
                let candidate = RigidPose {
                    rotation: rodrigues_from_matrix(&r),
                    translation: target.coords - r * center.coords,
                };
                let within = angle_between(&r, &Matrix3::identity()) <= envelope.max_rotation.to_radians() + 1e-12;
                if within && self.pose_acceptable(&candidate, envelope) {
                    poses.push(candidate);
                    break;
                }
                rejections += 1;
                if rejections >= envelope.max_rejections {
                    return Err(SimulatorError::EnvelopeInfeasible { pose, attempts: rejections });
                }
            }
        }
        Ok(poses)
    }
}
