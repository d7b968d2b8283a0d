//! White-scene raw images.

use image::{ImageBuffer, Luma};

use super::PhysicalCameraSpec;
use crate::rectification::{project_center, MlaMisalignmentSpec};

pub type WhiteImage = ImageBuffer<Luma<u16>, Vec<u16>>;

/// Peak disc intensity.
const PEAK: f64 = 50_000.0;

/// Gaussian discs of the given radius at `centers`. The profile has
/// `σ = radius/2.5` and is cut at the radius with a one-pixel soft edge.
pub fn render_discs(width: u32, height: u32, centers: &[(f64, f64)], radius: f64) -> WhiteImage {
    let sigma = radius / 2.5;
    let mut acc = vec![0.0f64; width as usize * height as usize];
    for &(cx, cy) in centers {
        let x0 = (cx - radius - 1.0).floor().max(0.0) as i64;
        let y0 = (cy - radius - 1.0).floor().max(0.0) as i64;
        let x1 = ((cx + radius + 1.0).ceil() as i64).min(width as i64 - 1);
        let y1 = ((cy + radius + 1.0).ceil() as i64).min(height as i64 - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let r = (x as f64 - cx).hypot(y as f64 - cy);
                let edge = (radius + 0.5 - r).clamp(0.0, 1.0);
                if edge > 0.0 {
                    acc[y as usize * width as usize + x as usize] +=
                        PEAK * edge * (-0.5 * (r / sigma).powi(2)).exp();
                }
            }
        }
    }
    let data = acc.into_iter().map(|v| v.round().clamp(0.0, u16::MAX as f64) as u16).collect();
    ImageBuffer::from_raw(width, height, data).expect("buffer size matches")
}

/// Micro-image centers of every lens whose disc touches the sensor, with
/// labels.
pub fn lens_centers(spec: &PhysicalCameraSpec, mla: &MlaMisalignmentSpec) -> Vec<((i64, i64), (f64, f64))> {
    let (w, h) = spec.sensor_resolution;
    let r = spec.micro_image_radius;
    let scale = mla.offset[2] / mla.sensor_z() * mla.pixel_pitch;
    // label range from the aligned layout, widened for tilt and rotation
    let label = |px: f64, axis: f64, offset: f64| ((px - axis) * scale - offset) / mla.lens_pitch;
    let range = |size: usize, axis: f64, offset: f64| {
        let a = label(-r, axis, offset);
        let b = label(size as f64 + r, axis, offset);
        let pad = 0.1 * (b - a).abs() + 3.0;
        ((a.min(b) - pad).floor() as i64, (a.max(b) + pad).ceil() as i64)
    };
    let (i0, i1) = range(w, mla.axis_pixel.0, mla.offset[0]);
    let (j0, j1) = range(h, mla.axis_pixel.1, mla.offset[1]);
    let mut out = Vec::new();
    for j in j0..=j1 {
        for i in i0..=i1 {
            if let Ok(c) = project_center(mla, (i, j)) {
                let (x, y) = c.center;
                if x > -r && y > -r && x < w as f64 + r && y < h as f64 + r {
                    out.push(((i, j), c.center));
                }
            }
        }
    }
    out
}

/// White-scene image of the sensor with the MLA placed by `mla`.
pub fn synthesize_white_image(spec: &PhysicalCameraSpec, mla: &MlaMisalignmentSpec) -> WhiteImage {
    let centers: Vec<(f64, f64)> = lens_centers(spec, mla).into_iter().map(|(_, c)| c).collect();
    let (w, h) = spec.sensor_resolution;
    render_discs(w as u32, h as u32, &centers, spec.micro_image_radius)
}
