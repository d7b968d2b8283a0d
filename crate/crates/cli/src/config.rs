//! Run configuration: defaults, JSON file, command-line overrides.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use plenocal::calibration::{CenterPolicy, RefineOptions};
use plenocal::rectification::MlaMisalignmentSpec;
use plenocal::simulator::{BoardSpec, PhysicalCameraSpec, PoseEnvelope};
use plenocal::tpp::Tpp;
use serde::{Deserialize, Serialize};

/// Distortion coefficients to inject. Centers are anchored to the ground
/// truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistortionConfig {
    pub s1: f64,
    pub s2: f64,
    pub t1: f64,
    pub t2: f64,
}

/// MLA placement relative to the aligned design.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MisalignmentConfig {
    /// Rotation vector of the MLA, degrees.
    pub rotation_deg: [f64; 3],
    /// Added to the aligned MLA position, mm.
    pub offset_mm: [f64; 3],
}

impl MisalignmentConfig {
    pub fn apply(&self, spec: &PhysicalCameraSpec) -> MlaMisalignmentSpec {
        let mut mla = spec.aligned_mla();
        let w = Vector3::from(self.rotation_deg);
        if w.norm() > 0.0 {
            mla = mla.rotated(w, w.norm());
        }
        for k in 0..3 {
            mla.offset[k] += self.offset_mm[k];
        }
        mla
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Pixel noise standard deviation.
    pub sigma: f64,
    pub poses: usize,
    pub out: PathBuf,
    pub camera: PhysicalCameraSpec,
    pub board: BoardSpec,
    pub envelope: PoseEnvelope,
    pub distortion: DistortionConfig,
    /// Simulate through a physically placed MLA instead of the TPP model.
    pub misalignment: Option<MisalignmentConfig>,
    /// Also render a white image.
    pub white_image: bool,
    /// Micro-image pitch for center detection; defaults to the camera's.
    pub expected_pitch_px: Option<f64>,
    /// Replaces the decode setting of the observation file.
    pub decode_setting: Option<Tpp<f64>>,
    /// Replaces `f'` of the decode setting.
    pub fixed_fprime: Option<f64>,
    pub center_policy: CenterPolicy,
    pub refine: RefineOptions,
    /// Inputs of the consuming commands, filled from the command line.
    pub inputs: Vec<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sigma: 0.0,
            poses: 12,
            out: PathBuf::from("out"),
            camera: PhysicalCameraSpec::reference(),
            board: BoardSpec::reference(),
            envelope: PoseEnvelope::reference(),
            distortion: DistortionConfig::default(),
            misalignment: None,
            white_image: false,
            expected_pitch_px: None,
            decode_setting: None,
            fixed_fprime: None,
            center_policy: CenterPolicy::Anchored,
            refine: RefineOptions::default(),
            inputs: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(format!("sigma must be a finite non-negative number, got {}", self.sigma));
        }
        if let Some(f) = self.fixed_fprime {
            if !(f > 0.0 && f.is_finite()) {
                return Err(format!("fixed f' must be positive, got {f}"));
            }
        }
        if let Some(p) = self.expected_pitch_px {
            if !(p > 0.0 && p.is_finite()) {
                return Err(format!("expected pitch must be positive, got {p}"));
            }
        }
        self.camera.validate().map_err(|e| e.to_string())?;
        self.board.validate().map_err(|e| e.to_string())?;
        Ok(())
    }
}
