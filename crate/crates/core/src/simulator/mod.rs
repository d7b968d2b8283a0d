//! Synthetic focused plenoptic camera: physical geometry to TPP parameters,
//! board poses, feature observations and white images.
//!
//! Lens frame: main lens at the origin, optical axis `+Z` into the camera,
//! lengths in mm. The MLA and sensor sit at `Z_oa`, `Z_os`; the scene is at
//! negative `Z`. The thin lens maps an inside point `P` to its conjugate
//! `F/(F - Z)·P` in object space.
//!
//! Camera frame: the outside TPP normalized to positive scales, in pixel
//! units (mm divided by the pixel pitch). See [`FrameConvention`].

mod observations;
mod poses;
mod white;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::board::Board;
use crate::calibration::{anchored_centers, default_setting};
use crate::projection::Distortion;
use crate::rectification::MlaMisalignmentSpec;
use crate::tpp::Tpp;

pub use observations::Engine;
pub use poses::PoseEnvelope;
pub use white::{lens_centers, render_discs, synthesize_white_image, WhiteImage};

/// Distance below which a plane counts as lying on the focal plane.
pub const FOCAL_TOLERANCE_MM: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulatorError {
    #[error("plane at Z = {0} mm lies on the main-lens focal plane")]
    FocalSingularity(f64),
    #[error("invalid camera spec: {0}")]
    InvalidSpec(String),
    #[error("no pose found inside the envelope after {attempts} rejections (pose {pose})")]
    EnvelopeInfeasible { pose: usize, attempts: usize },
}

/// Physical layout of a focused plenoptic camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalCameraSpec {
    /// Main-lens focal length `F`, mm.
    pub main_focal: f64,
    /// `(X_os, Y_os, Z_os)`: position of pixel `(0, 0)`, mm.
    pub sensor_origin: [f64; 3],
    /// `(X_oa, Y_oa, Z_oa)`: center of micro-lens `(0, 0)`, mm.
    pub mla_origin: [f64; 3],
    pub pixel_pitch: f64,
    /// `(width, height)` in pixels.
    pub sensor_resolution: (usize, usize),
    /// Micro-lens pitch `d_m`, mm.
    pub lens_pitch: f64,
    /// Micro-image radius in pixels.
    pub micro_image_radius: f64,
}

impl PhysicalCameraSpec {
    /// 50 mm main lens, 300 µm MLA pitch and 9 µm pixels on a 4008×2672
    /// sensor, with the reference lens on the optical axis.
    pub fn reference() -> Self {
        let pixel = 0.009;
        Self {
            main_focal: 50.0,
            sensor_origin: [-2004.0 * pixel, -1336.0 * pixel, 72.3],
            mla_origin: [0.0, 0.0, 69.0],
            pixel_pitch: pixel,
            sensor_resolution: (4008, 2672),
            lens_pitch: 0.3,
            micro_image_radius: 17.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimulatorError> {
        let finite = [self.main_focal, self.pixel_pitch, self.lens_pitch, self.micro_image_radius]
            .iter()
            .chain(self.sensor_origin.iter())
            .chain(self.mla_origin.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(SimulatorError::InvalidSpec("non-finite value".into()));
        }
        if self.main_focal <= 0.0 || self.pixel_pitch <= 0.0 || self.lens_pitch <= 0.0 {
            return Err(SimulatorError::InvalidSpec("focal length and pitches must be positive".into()));
        }
        if self.micro_image_radius <= 0.0 {
            return Err(SimulatorError::InvalidSpec("micro-image radius must be positive".into()));
        }
        if self.sensor_resolution.0 == 0 || self.sensor_resolution.1 == 0 {
            return Err(SimulatorError::InvalidSpec("empty sensor".into()));
        }
        for z in [self.sensor_origin[2], self.mla_origin[2]] {
            if (z - self.main_focal).abs() < FOCAL_TOLERANCE_MM {
                return Err(SimulatorError::FocalSingularity(z));
            }
        }
        if (self.sensor_origin[2] - self.mla_origin[2]).abs() < FOCAL_TOLERANCE_MM {
            return Err(SimulatorError::InvalidSpec("sensor and MLA planes coincide".into()));
        }
        Ok(())
    }

    /// Lateral magnification `F/(F - Z)` of the plane at `z`.
    pub fn magnification(&self, z: f64) -> f64 {
        self.main_focal / (self.main_focal - z)
    }

    /// Micro-image pitch on the sensor in pixels (lens pitch projected from
    /// the main-lens center).
    pub fn micro_image_pitch_px(&self) -> f64 {
        self.lens_pitch * self.sensor_origin[2] / self.mla_origin[2] / self.pixel_pitch
    }

    /// MLA-to-sensor distance in pixels.
    pub fn sensor_gap_px(&self) -> f64 {
        (self.sensor_origin[2] - self.mla_origin[2]).abs() / self.pixel_pitch
    }

    pub fn image_center(&self) -> (f64, f64) {
        (self.sensor_resolution.0 as f64 / 2.0, self.sensor_resolution.1 as f64 / 2.0)
    }

    /// Pixel coordinates of the optical axis on the sensor.
    pub fn axis_pixel(&self) -> (f64, f64) {
        (-self.sensor_origin[0] / self.pixel_pitch, -self.sensor_origin[1] / self.pixel_pitch)
    }

    /// Decode setting derived from the nominal sensor geometry.
    pub fn decode_setting(&self) -> Tpp<f64> {
        default_setting(
            self.sensor_resolution.0,
            self.sensor_resolution.1,
            self.micro_image_pitch_px(),
            self.sensor_gap_px(),
        )
    }

    /// Misalignment-free MLA placement.
    pub fn aligned_mla(&self) -> MlaMisalignmentSpec {
        MlaMisalignmentSpec {
            rotation: [0.0; 3],
            offset: self.mla_origin,
            lens_pitch: self.lens_pitch,
            sensor_gap: self.sensor_origin[2] - self.mla_origin[2],
            pixel_pitch: self.pixel_pitch,
            axis_pixel: self.axis_pixel(),
        }
    }

    pub fn contains_pixel(&self, p: (f64, f64)) -> bool {
        let (w, h) = self.sensor_resolution;
        p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (w - 1) as f64 && p.1 <= (h - 1) as f64
    }
}

/// Calibration board.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoardSpec {
    pub rows: usize,
    pub cols: usize,
    /// Cell `(width, height)` in mm.
    pub cell: (f64, f64),
}

impl BoardSpec {
    /// 5×5 points, 54 mm cells.
    pub fn reference() -> Self {
        Self { rows: 5, cols: 5, cell: (54.0, 54.0) }
    }

    pub fn validate(&self) -> Result<(), SimulatorError> {
        if self.rows < 2 || self.cols < 2 {
            return Err(SimulatorError::InvalidSpec("board needs at least 2×2 points".into()));
        }
        if !(self.cell.0 > 0.0 && self.cell.1 > 0.0) {
            return Err(SimulatorError::InvalidSpec("board cells must be positive".into()));
        }
        Ok(())
    }

    /// Board in pixel units.
    pub fn to_board(&self, pixel_pitch: f64) -> Board {
        Board::new(self.rows, self.cols, (self.cell.0 / pixel_pitch, self.cell.1 / pixel_pitch))
    }
}

/// In-camera and outside TPP parameters of a physical spec, in mm, before
/// any sign normalization.
///
/// In-camera: `x` on the sensor from pixel `(0, 0)`, `u` on the MLA,
/// `f_in = Z_oa - Z_os`. Outside: both planes imaged through the main lens,
/// `k_out = k_in·F/(F - Z)`, `u_out = m_a X_oa - m_s X_os` and
/// `f_out = Z'_oa - Z'_os`.
pub fn physical_to_tpp(spec: &PhysicalCameraSpec) -> Result<(Tpp<f64>, Tpp<f64>), SimulatorError> {
    spec.validate()?;
    let [xs, ys, zs] = spec.sensor_origin;
    let [xa, ya, za] = spec.mla_origin;
    let (p, d) = (spec.pixel_pitch, spec.lens_pitch);
    let tpp_in = Tpp::isotropic(p, d, xa - xs, ya - ys, za - zs, za - zs);
    let (ms, ma) = (spec.magnification(zs), spec.magnification(za));
    let f_out = ma * za - ms * zs;
    let tpp_out = Tpp::isotropic(ms * p, ma * d, ma * xa - ms * xs, ma * ya - ms * ys, f_out, f_out);
    Ok((tpp_in, tpp_out))
}

/// Map between the lens frame (object side, mm) and the camera frame.
///
/// `x = s_x (X' - X'_0)/p`, `y = s_x (Y' - Y'_0)/p`, `z = s_z (Z' - Z'_s)/p`
/// with `(X'_0, Y'_0, Z'_s)` the image of pixel `(0, 0)`. The signs make the
/// scales and `f` positive. When `s_x² s_z < 0` the camera frame is the
/// mirror image of the lens frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameConvention {
    pub sign_xy: f64,
    pub sign_z: f64,
    /// `(X'_0, Y'_0, Z'_s)` in mm.
    pub origin: [f64; 3],
    pub pixel_pitch: f64,
}

impl FrameConvention {
    pub fn to_camera(&self, lens: &Point3<f64>) -> Point3<f64> {
        let p = self.pixel_pitch;
        Point3::new(
            self.sign_xy * (lens.x - self.origin[0]) / p,
            self.sign_xy * (lens.y - self.origin[1]) / p,
            self.sign_z * (lens.z - self.origin[2]) / p,
        )
    }

    pub fn to_lens(&self, camera: &Point3<f64>) -> Point3<f64> {
        let p = self.pixel_pitch;
        Point3::new(
            self.origin[0] + self.sign_xy * camera.x * p,
            self.origin[1] + self.sign_xy * camera.y * p,
            self.origin[2] + self.sign_z * camera.z * p,
        )
    }

    pub fn is_mirrored(&self) -> bool {
        self.sign_z < 0.0
    }
}

/// Ground-truth parameters of a physical spec.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub tpp_in: Tpp<f64>,
    pub tpp_out: Tpp<f64>,
    /// Normalized outside TPP in pixel units: the metric camera model.
    pub camera: Tpp<f64>,
    pub frame: FrameConvention,
}

impl GroundTruth {
    pub fn from_spec(spec: &PhysicalCameraSpec) -> Result<Self, SimulatorError> {
        let (tpp_in, tpp_out) = physical_to_tpp(spec)?;
        let sx = tpp_out.k_x.signum();
        if tpp_out.k_u.signum() != sx {
            return Err(SimulatorError::InvalidSpec(
                "sensor and MLA lie on opposite sides of the focal plane".into(),
            ));
        }
        let sz = tpp_out.f.signum();
        let p = spec.pixel_pitch;
        let camera = Tpp::camera(
            sx * tpp_out.k_x / p,
            sx * tpp_out.k_u / p,
            sx * tpp_out.u_0 / p,
            sx * tpp_out.v_0 / p,
            sz * tpp_out.f / p,
        );
        let ms = spec.magnification(spec.sensor_origin[2]);
        let frame = FrameConvention {
            sign_xy: sx,
            sign_z: sz,
            origin: [
                ms * spec.sensor_origin[0],
                ms * spec.sensor_origin[1],
                ms * spec.sensor_origin[2],
            ],
            pixel_pitch: p,
        };
        Ok(Self { tpp_in, tpp_out, camera, frame })
    }

    /// Main-lens center in the camera frame.
    pub fn main_lens_center(&self) -> Point3<f64> {
        self.frame.to_camera(&Point3::origin())
    }
}

/// Conjugate through a thin lens of focal length `focal`: inside point to
/// object-side point.
pub fn thin_lens_outside(focal: f64, inside: &Point3<f64>) -> Point3<f64> {
    Point3::from(inside.coords * (focal / (focal - inside.z)))
}

/// Object-side point to its image inside the camera.
pub fn thin_lens_inside(focal: f64, outside: &Point3<f64>) -> Point3<f64> {
    Point3::from(outside.coords * (focal / (focal + outside.z)))
}

/// A simulated camera looking at a board.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulator {
    pub spec: PhysicalCameraSpec,
    pub board: BoardSpec,
    pub truth: GroundTruth,
    pub engine: Engine,
}

impl Simulator {
    pub fn new(spec: PhysicalCameraSpec, board: BoardSpec) -> Result<Self, SimulatorError> {
        board.validate()?;
        let truth = GroundTruth::from_spec(&spec)?;
        Ok(Self { spec, board, truth, engine: Engine::Tpp })
    }

    pub fn reference() -> Self {
        Self::new(PhysicalCameraSpec::reference(), BoardSpec::reference()).expect("valid built-in spec")
    }

    /// Use the physical ray trace with the given MLA placement.
    pub fn with_misalignment(mut self, mla: MlaMisalignmentSpec) -> Self {
        self.engine = Engine::Physical(mla);
        self
    }

    /// Board in pixel units, as used by calibration.
    pub fn calibration_board(&self) -> Board {
        self.board.to_board(self.spec.pixel_pitch)
    }

    /// `dist` with its centers anchored to the ground-truth camera.
    pub fn anchored(&self, dist: &Distortion<f64>) -> Distortion<f64> {
        anchored_centers(&self.truth.camera, self.spec.image_center(), dist)
    }
}
