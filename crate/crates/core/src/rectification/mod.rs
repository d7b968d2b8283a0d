//! MLA–sensor misalignment: micro-image centers from white images, row
//! slope analysis and the rectifying homography.

mod detect;
mod fit;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rotation::rodrigues;

pub use detect::detect_centers;
pub use fit::{
    apply_homography, estimate_rectifying_homography, map_centers, rectify_observations, row_slopes, slope_range,
    warp_image, RectifyingHomography, MIN_ROW_CENTERS,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RectificationError {
    #[error("degenerate MLA geometry: {0}")]
    DegenerateGeometry(String),
    #[error("no micro-lens grid found ({0} blobs)")]
    NoGridFound(usize),
    #[error("median spacing {measured:.3} px deviates from the expected pitch {expected:.3} px")]
    AmbiguousPitch { measured: f64, expected: f64 },
    #[error("too few centers: {0}")]
    TooFewCenters(String),
    #[error("degenerate center configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("observation {0} maps to the line at infinity")]
    PointAtInfinity(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Placement of the MLA relative to the main lens.
///
/// Lens `(i, j)` sits at `R (i d, j d, 0) + (x_m, y_m, L)` (mm, main lens at
/// the origin) and the sensor is the plane `z = L + l`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlaMisalignmentSpec {
    /// Rodrigues vector of `R_mla`.
    pub rotation: [f64; 3],
    /// `(x_m, y_m, L)`.
    pub offset: [f64; 3],
    /// `d_m`.
    pub lens_pitch: f64,
    /// `l`, MLA-to-sensor distance along the axis.
    pub sensor_gap: f64,
    /// Sensor pixel pitch, mm.
    pub pixel_pitch: f64,
    /// Pixel coordinates where the optical axis meets the sensor.
    pub axis_pixel: (f64, f64),
}

impl MlaMisalignmentSpec {
    pub fn validate(&self) -> Result<(), RectificationError> {
        let values = self.rotation.iter().chain(self.offset.iter()).chain([
            &self.lens_pitch,
            &self.sensor_gap,
            &self.pixel_pitch,
            &self.axis_pixel.0,
            &self.axis_pixel.1,
        ]);
        if !values.into_iter().all(|v| v.is_finite()) {
            return Err(RectificationError::InvalidInput("non-finite MLA parameter".into()));
        }
        if self.offset[2] <= 0.0 || self.lens_pitch <= 0.0 || self.sensor_gap <= 0.0 || self.pixel_pitch <= 0.0 {
            return Err(RectificationError::InvalidInput(
                "L, lens pitch, sensor gap and pixel pitch must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The same MLA turned by `angle_deg` about `axis` (about its reference lens).
    pub fn rotated(mut self, axis: Vector3<f64>, angle_deg: f64) -> Self {
        let w = axis.normalize() * angle_deg.to_radians();
        self.rotation = [w.x, w.y, w.z];
        self
    }

    /// Center of lens `(i, j)`, mm.
    pub fn lens_center(&self, lens: (i64, i64)) -> Point3<f64> {
        let r = rodrigues(&Vector3::from(self.rotation));
        let local = Vector3::new(lens.0 as f64 * self.lens_pitch, lens.1 as f64 * self.lens_pitch, 0.0);
        Point3::from(r * local + Vector3::from(self.offset))
    }

    /// `L + l`.
    pub fn sensor_z(&self) -> f64 {
        self.offset[2] + self.sensor_gap
    }

    /// Sensor-plane position (mm, relative to the axis) to pixels.
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.pixel_pitch + self.axis_pixel.0, y / self.pixel_pitch + self.axis_pixel.1)
    }
}

/// Micro-image center with its lattice label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroImageCenter {
    pub label: (i64, i64),
    /// `(x, y)` in pixels.
    pub center: (f64, f64),
}

/// Center of the micro-image of `label`: the main-lens center projected
/// through the lens onto the sensor, `((L + l)/z_g)·(x_g, y_g)`.
pub fn project_center(spec: &MlaMisalignmentSpec, label: (i64, i64)) -> Result<MicroImageCenter, RectificationError> {
    let g = spec.lens_center(label);
    if !(g.z > 0.0) {
        return Err(RectificationError::DegenerateGeometry(format!(
            "lens {label:?} at z = {} is not in front of the sensor",
            g.z
        )));
    }
    let s = spec.sensor_z() / g.z;
    Ok(MicroImageCenter { label, center: spec.to_pixel(s * g.x, s * g.y) })
}

#[cfg(test)]
mod tests;
