//! Board-based calibration: linear initialization from ray-to-board
//! homographies, then damped least-squares refinement of the re-projection
//! error.

pub mod closed_form;
pub mod homography;
pub mod refine;

use std::collections::{BTreeMap, HashMap};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::board::Board;
use crate::projection::{residuals, sort_observations, Distortion, Observation, ProjectionError, RigidPose};
use crate::tpp::{decode_virtual_ray, projective_matrix, Tpp, TppError};

pub use closed_form::{
    closed_form_intrinsics, extrinsics_from_homography, solve_q, ExtrinsicEstimate, Intrinsics, QSolution,
};
pub use homography::{estimate_homography, Homography, PointRays};
pub use refine::{refine, RefineOptions, RefineReport, Termination};

/// Width of one residual-histogram bin, in pixels.
pub const HISTOGRAM_BIN: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("board points are collinear")]
    DegenerateBoard,
    #[error("need at least 3 poses, got {0}")]
    InsufficientPoses(usize),
    #[error("pose constraints are ill-conditioned: {0}")]
    IllConditioned(String),
    #[error("closed-form solution has no real value: {0}")]
    NegativeDiscriminant(String),
    #[error("projective matrix is singular")]
    SingularProjective,
    #[error("recovered rotation is a reflection")]
    ReflectionDetected,
    #[error("optimization diverged after {0} consecutive rejected steps")]
    DivergedOptimization(usize),
    #[error("residual is not finite")]
    NonFiniteResidual,
    #[error(transparent)]
    Tpp(#[from] TppError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
}

/// How the distortion centers are handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterPolicy {
    /// Tied to the current camera model: `(u_0, v_0)` on the u-v plane and
    /// the image center on the x-y plane. Not free parameters.
    #[default]
    Anchored,
    /// Optimized together with the other parameters.
    Free,
}

/// Decode setting used when nothing better is known: unit pixel scale,
/// micro-image pitch as lens scale, image center as offset and the
/// sensor-MLA gap as plane separation, all in pixels.
pub fn default_setting(width: usize, height: usize, micro_image_pitch_px: f64, sensor_gap_px: f64) -> Tpp<f64> {
    Tpp::isotropic(
        1.0,
        micro_image_pitch_px,
        width as f64 / 2.0,
        height as f64 / 2.0,
        sensor_gap_px,
        sensor_gap_px,
    )
}

/// Observations of one board over several poses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationInput {
    pub board: Board,
    pub observations: Vec<Observation>,
}

impl CalibrationInput {
    pub fn pose_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.observations.iter().map(|o| o.pose_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Keep only the given poses.
    pub fn restricted_to(&self, pose_ids: &[usize]) -> Self {
        Self {
            board: self.board,
            observations: self
                .observations
                .iter()
                .filter(|o| pose_ids.contains(&o.pose_id))
                .copied()
                .collect(),
        }
    }
}

/// Calibration options shared by the linear and nonlinear stages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// Raw-image center in pixels, used for the anchored x-y distortion center.
    pub image_center: (f64, f64),
    pub center_policy: CenterPolicy,
    pub refine: RefineOptions,
}

impl CalibrationOptions {
    pub fn new(image_center: (f64, f64)) -> Self {
        Self { image_center, center_policy: CenterPolicy::Anchored, refine: RefineOptions::default() }
    }
}

/// Distortion centers implied by `camera` under the anchored policy.
pub fn anchored_centers(camera: &Tpp<f64>, image_center: (f64, f64), dist: &Distortion<f64>) -> Distortion<f64> {
    Distortion {
        x_c: camera.k_x * image_center.0,
        y_c: camera.k_y * image_center.1,
        u_c: camera.u_0,
        v_c: camera.v_0,
        ..*dist
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Calibrated camera model (metric TPP in the scene).
    pub tpp: Tpp<f64>,
    /// The same model relative to the decode setting.
    pub decode: Tpp<f64>,
    pub setting: Tpp<f64>,
    pub dist: Distortion<f64>,
    pub poses: BTreeMap<usize, RigidPose<f64>>,
    pub rms: f64,
    /// `(lower bin edge, count)` of residual magnitudes.
    pub residual_histogram: Vec<(f64, usize)>,
    pub observation_count: usize,
}

impl CalibrationResult {
    /// Evaluate residuals of `input` under this result and fill `rms` and the
    /// histogram.
    pub fn from_parts(
        input: &CalibrationInput,
        decode: Tpp<f64>,
        setting: Tpp<f64>,
        dist: Distortion<f64>,
        poses: BTreeMap<usize, RigidPose<f64>>,
    ) -> Result<Self, CalibrationError> {
        let pose_map: HashMap<usize, RigidPose<f64>> = poses.iter().map(|(k, v)| (*k, *v)).collect();
        let res = residuals(&input.observations, &input.board.points(), &pose_map, &decode, &setting, &dist)?;
        if !res.rms.is_finite() {
            return Err(CalibrationError::NonFiniteResidual);
        }
        let magnitudes: Vec<f64> = res.values.iter().map(|(dx, dy)| dx.hypot(*dy)).collect();
        Ok(Self {
            tpp: decode.camera_from_decode(&setting),
            decode,
            setting,
            dist,
            poses,
            rms: res.rms,
            residual_histogram: histogram(&magnitudes, HISTOGRAM_BIN),
            observation_count: res.values.len(),
        })
    }
}

/// Counts per bin of width `bin`, starting at zero, up to the largest value.
pub fn histogram(values: &[f64], bin: f64) -> Vec<(f64, usize)> {
    let max = values.iter().copied().fold(0.0, f64::max);
    let bins = (max / bin).floor() as usize + 1;
    let mut counts = vec![0usize; if values.is_empty() { 0 } else { bins }];
    for v in values {
        let k = ((v / bin).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts.into_iter().enumerate().map(|(k, c)| (k as f64 * bin, c)).collect()
}

/// Everything the linear stage produced.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearStage {
    pub homographies: BTreeMap<usize, Homography>,
    pub q: QSolution,
    pub intrinsics: Intrinsics,
    pub decode: Tpp<f64>,
    pub projective: Matrix4<f64>,
    pub poses: BTreeMap<usize, ExtrinsicEstimate>,
}

/// Decoded rays per board point for one pose, in point order. Points seen by
/// fewer than two lenses are dropped.
pub fn rays_for_pose(input: &CalibrationInput, pose_id: usize, setting: &Tpp<f64>) -> Result<Vec<PointRays>, CalibrationError> {
    let mut by_point: BTreeMap<usize, Vec<&Observation>> = BTreeMap::new();
    for o in input.observations.iter().filter(|o| o.pose_id == pose_id) {
        by_point.entry(o.point_id).or_default().push(o);
    }
    let mut out = Vec::new();
    for (point_id, mut obs) in by_point {
        let point = input
            .board
            .point(point_id)
            .ok_or(ProjectionError::MissingReference { kind: "board point", id: point_id })?;
        if obs.len() < 2 {
            continue;
        }
        obs.sort_by_key(|o| (o.lens_i, o.lens_j));
        out.push(PointRays {
            board: (point.x, point.y),
            rays: obs
                .iter()
                .map(|o| decode_virtual_ray((o.px, o.py), (o.lens_i, o.lens_j), setting))
                .collect(),
        });
    }
    Ok(out)
}

/// Linear initialization: homographies, `Q`, decode-relative intrinsics and
/// per-pose extrinsics.
pub fn linear_calibration(input: &CalibrationInput, setting: &Tpp<f64>) -> Result<LinearStage, CalibrationError> {
    setting.validate()?;
    let pose_ids = input.pose_ids();
    if pose_ids.len() < closed_form::MIN_POSES {
        return Err(CalibrationError::InsufficientPoses(pose_ids.len()));
    }
    let mut homographies = BTreeMap::new();
    for &id in &pose_ids {
        let points = rays_for_pose(input, id, setting)?;
        homographies.insert(id, estimate_homography(&points)?);
    }
    let hs: Vec<Homography> = homographies.values().copied().collect();
    let q = solve_q(&hs, setting.f_prime)?;
    let intrinsics = closed_form_intrinsics(&q, setting.f_prime)?;
    let decode = Tpp::isotropic(
        intrinsics.k_xy,
        intrinsics.k_uv,
        intrinsics.u_0,
        intrinsics.v_0,
        setting.f_prime,
        intrinsics.f,
    );
    let projective = projective_matrix(&decode)?;
    let mut poses = BTreeMap::new();
    for (id, h) in &homographies {
        let est = extrinsics_from_homography(h, &projective)?;
        log::debug!(
            "pose {id}: ‖RᵀR − I‖ = {:.3e} before projection (r2 normalized by ‖P⁻¹h₂‖)",
            est.orthonormality_error
        );
        poses.insert(*id, est);
    }
    Ok(LinearStage { homographies, q, intrinsics, decode, projective, poses })
}

/// Result of the linear stage alone, with zero distortion.
pub fn linear_result(
    input: &CalibrationInput,
    setting: &Tpp<f64>,
    options: &CalibrationOptions,
) -> Result<(LinearStage, CalibrationResult), CalibrationError> {
    let linear = linear_calibration(input, setting)?;
    let camera = linear.decode.camera_from_decode(setting);
    let dist = anchored_centers(&camera, options.image_center, &Distortion::none());
    let poses = linear.poses.iter().map(|(k, e)| (*k, e.pose)).collect();
    let result = CalibrationResult::from_parts(input, linear.decode, *setting, dist, poses)?;
    Ok((linear, result))
}

/// Full calibration: linear initialization followed by refinement.
pub fn calibrate(
    input: &CalibrationInput,
    setting: &Tpp<f64>,
    options: &CalibrationOptions,
) -> Result<(CalibrationResult, RefineReport), CalibrationError> {
    let mut input = input.clone();
    sort_observations(&mut input.observations);
    let (_, initial) = linear_result(&input, setting, options)?;
    refine(&initial, &input, options)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_everything() {
        let h = histogram(&[0.0, 0.05, 0.1, 0.25, 0.31], 0.1);
        assert_eq!(h.len(), 4);
        assert_eq!(h.iter().map(|b| b.1).sum::<usize>(), 5);
        assert_eq!(h[0], (0.0, 2));
        assert_eq!(h[3].1, 1);
        assert!(histogram(&[], 0.1).is_empty());
    }

    #[test]
    fn default_setting_is_isotropic() {
        let s = default_setting(4008, 2672, 34.93, 366.7);
        assert_eq!((s.u_0, s.v_0), (2004.0, 1336.0));
        assert!(s.validate().is_ok());
    }
}
