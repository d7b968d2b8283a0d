use super::*;
use crate::projection::Observation;
use crate::simulator::{lens_centers, render_discs, synthesize_white_image, PhysicalCameraSpec};
use approx::assert_relative_eq;
use image::{ImageBuffer, Luma};
use nalgebra::Matrix3;

fn small_spec() -> PhysicalCameraSpec {
    let p = 0.009;
    PhysicalCameraSpec {
        sensor_origin: [-600.0 * p, -450.0 * p, 72.3],
        sensor_resolution: (1200, 900),
        ..PhysicalCameraSpec::reference()
    }
}

fn centers_of(spec: &PhysicalCameraSpec, mla: &MlaMisalignmentSpec) -> Vec<MicroImageCenter> {
    let (w, h) = spec.sensor_resolution;
    lens_centers(spec, mla)
        .into_iter()
        .filter(|(_, c)| c.0 >= 0.0 && c.1 >= 0.0 && c.0 <= (w - 1) as f64 && c.1 <= (h - 1) as f64)
        .map(|(label, center)| MicroImageCenter { label, center })
        .collect()
}

fn tilted(spec: &PhysicalCameraSpec, deg: f64) -> MlaMisalignmentSpec {
    spec.aligned_mla().rotated(nalgebra::Vector3::y(), deg)
}

#[test]
fn aligned_centers_form_magnified_grid() {
    let mla = MlaMisalignmentSpec {
        rotation: [0.0; 3],
        offset: [0.0, 0.0, 69.0],
        lens_pitch: 0.3,
        sensor_gap: 3.3,
        pixel_pitch: 0.009,
        axis_pixel: (0.0, 0.0),
    };
    let m = 72.3 / 69.0;
    for (i, j) in [(0, 0), (3, -2), (-40, 17)] {
        let c = project_center(&mla, (i, j)).unwrap();
        assert_relative_eq!(c.center.0, m * i as f64 * 0.3 / 0.009, epsilon = 1e-9);
        assert_relative_eq!(c.center.1, m * j as f64 * 0.3 / 0.009, epsilon = 1e-9);
    }
    let spacing = |a: (i64, i64), b: (i64, i64)| {
        let (p, q) = (project_center(&mla, a).unwrap().center, project_center(&mla, b).unwrap().center);
        (p.0 - q.0).hypot(p.1 - q.1)
    };
    let d0 = spacing((0, 0), (1, 0));
    for k in -50..50 {
        assert!((spacing((k, k), (k + 1, k)) - d0).abs() < 1e-12 * d0.max(1.0) * 100.0);
        assert!((spacing((k, -k), (k, -k + 1)) - d0).abs() < 1e-12 * d0.max(1.0) * 100.0);
    }
}

#[test]
fn reference_lens_ignores_rotation() {
    let mla = MlaMisalignmentSpec {
        rotation: [0.02, -0.05, 0.3],
        offset: [0.4, -0.2, 69.0],
        lens_pitch: 0.3,
        sensor_gap: 3.3,
        pixel_pitch: 0.009,
        axis_pixel: (0.0, 0.0),
    };
    let c = project_center(&mla, (0, 0)).unwrap();
    let m = 72.3 / 69.0 / 0.009;
    assert_relative_eq!(c.center.0, m * 0.4, epsilon = 1e-9);
    assert_relative_eq!(c.center.1, m * -0.2, epsilon = 1e-9);
}

#[test]
fn lens_behind_main_lens_is_degenerate() {
    let mla = PhysicalCameraSpec::reference().aligned_mla().rotated(nalgebra::Vector3::y(), 60.0);
    assert!(matches!(project_center(&mla, (400, 0)), Err(RectificationError::DegenerateGeometry(_))));
}

#[test]
fn slopes_of_simple_grids() {
    let grid: Vec<MicroImageCenter> = (0..5)
        .flat_map(|j| (0..20).map(move |i| MicroImageCenter { label: (i, j), center: (10.0 * i as f64, 10.0 * j as f64) }))
        .collect();
    for (_, s) in row_slopes(&grid).unwrap() {
        assert!(s.abs() < 1e-12);
    }
    let theta: f64 = 0.013;
    let rotated: Vec<MicroImageCenter> = grid
        .iter()
        .map(|c| {
            let (x, y) = c.center;
            MicroImageCenter { label: c.label, center: (x * theta.cos() - y * theta.sin(), x * theta.sin() + y * theta.cos()) }
        })
        .collect();
    for (_, s) in row_slopes(&rotated).unwrap() {
        assert!((s - theta.tan()).abs() < 1e-9);
    }
    assert!(matches!(row_slopes(&grid[..25]), Err(RectificationError::TooFewCenters(_))));
}

#[test]
fn tilted_mla_slopes_vary_linearly_with_row() {
    let spec = PhysicalCameraSpec::reference();
    let slopes = row_slopes(&centers_of(&spec, &tilted(&spec, 0.5))).unwrap();
    let n = slopes.len() as f64;
    let (mj, ms) = (
        slopes.iter().map(|s| s.0 as f64).sum::<f64>() / n,
        slopes.iter().map(|s| s.1).sum::<f64>() / n,
    );
    let sxy: f64 = slopes.iter().map(|s| (s.0 as f64 - mj) * (s.1 - ms)).sum();
    let sxx: f64 = slopes.iter().map(|s| (s.0 as f64 - mj).powi(2)).sum();
    let b = sxy / sxx;
    let worst = slopes.iter().map(|s| (s.1 - ms - b * (s.0 as f64 - mj)).abs()).fold(0.0, f64::max);
    let range = slope_range(&slopes);
    assert!(range > 1e-5);
    assert!(worst < 1e-3 * range, "residual {worst:e} vs range {range:e}");
    assert!(b.abs() > 0.0);
}

#[test]
fn uniform_grid_gives_identity() {
    let centers: Vec<MicroImageCenter> = (-5..6)
        .flat_map(|j| (-7..8).map(move |i| MicroImageCenter { label: (i, j), center: (500.0 + 34.9 * i as f64, 300.0 + 34.9 * j as f64) }))
        .collect();
    let h = estimate_rectifying_homography(&centers, None).unwrap();
    assert!((h.matrix - Matrix3::identity()).amax() < 1e-9, "{}", h.matrix);
    assert!(h.rms < 1e-9);
    assert_relative_eq!(h.pitch, 34.9, epsilon = 1e-9);
}

#[test]
fn rectifies_tilted_mla() {
    let spec = PhysicalCameraSpec::reference();
    let centers = centers_of(&spec, &tilted(&spec, 0.5));
    let before = slope_range(&row_slopes(&centers).unwrap());
    let h = estimate_rectifying_homography(&centers, None).unwrap();
    assert!(h.rms < 0.05, "rms {}", h.rms);
    let mapped = map_centers(&centers, &h.matrix).unwrap();
    let after = slope_range(&row_slopes(&mapped).unwrap());
    assert!(after < before && after < 0.1 * before, "{after:e} vs {before:e}");
    let refit = estimate_rectifying_homography(&mapped, None).unwrap();
    assert!((refit.matrix - Matrix3::identity()).amax() < 1e-8, "{}", refit.matrix);
}

#[test]
fn degenerate_center_sets() {
    let row: Vec<MicroImageCenter> =
        (0..10).map(|i| MicroImageCenter { label: (i, 0), center: (i as f64 * 30.0, 5.0) }).collect();
    assert!(matches!(estimate_rectifying_homography(&row, None), Err(RectificationError::DegenerateConfiguration(_))));
    assert!(matches!(estimate_rectifying_homography(&row[..3], None), Err(RectificationError::DegenerateConfiguration(_))));
}

#[test]
fn observation_mapping() {
    let obs = vec![
        Observation { pose_id: 0, point_id: 1, lens_i: 2, lens_j: -3, px: 10.5, py: 20.25 },
        Observation { pose_id: 1, point_id: 0, lens_i: 0, lens_j: 0, px: -4.0, py: 7.0 },
    ];
    assert_eq!(rectify_observations(&obs, &Matrix3::identity()).unwrap(), obs);
    let shift = Matrix3::new(1.0, 0.0, 3.0, 0.0, 1.0, -2.0, 0.0, 0.0, 1.0);
    let moved = rectify_observations(&obs, &shift).unwrap();
    for (a, b) in obs.iter().zip(&moved) {
        assert_eq!((b.px - a.px, b.py - a.py), (3.0, -2.0));
        assert_eq!((a.lens_i, a.lens_j), (b.lens_i, b.lens_j));
    }
    // third row vanishes at x = 10.5
    let singular = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -10.5);
    assert_eq!(rectify_observations(&obs, &singular), Err(RectificationError::PointAtInfinity(0)));
}

#[test]
fn detects_generator_centers() {
    let spec = small_spec();
    let mla = spec.aligned_mla();
    let image = synthesize_white_image(&spec, &mla);
    let found = detect_centers(&image, spec.micro_image_pitch_px()).unwrap();
    let truth = centers_of(&spec, &mla);
    assert!(found.len() as f64 >= 0.9 * truth.len() as f64, "{} of {}", found.len(), truth.len());
    let worst = found
        .iter()
        .map(|c| {
            truth
                .iter()
                .map(|t| (t.center.0 - c.center.0).hypot(t.center.1 - c.center.1))
                .fold(f64::MAX, f64::min)
        })
        .fold(0.0, f64::max);
    assert!(worst < 0.05, "worst center error {worst}");
}

#[test]
fn labels_follow_the_lattice_under_rotation() {
    let spec = small_spec();
    let mla = tilted(&spec, 0.5).rotated(nalgebra::Vector3::new(0.0, 1.0, 1.0), 0.5);
    let image = synthesize_white_image(&spec, &mla);
    let found = detect_centers(&image, spec.micro_image_pitch_px()).unwrap();
    let truth = centers_of(&spec, &mla);
    let mut offset = None;
    for c in &found {
        let t = truth
            .iter()
            .min_by(|a, b| {
                let da = (a.center.0 - c.center.0).hypot(a.center.1 - c.center.1);
                let db = (b.center.0 - c.center.0).hypot(b.center.1 - c.center.1);
                da.total_cmp(&db)
            })
            .unwrap();
        let d = (t.label.0 - c.label.0, t.label.1 - c.label.1);
        assert_eq!(*offset.get_or_insert(d), d, "label skip at {:?}", c.label);
    }
}

#[test]
fn featureless_and_wrong_pitch_images() {
    let flat: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_pixel(300, 300, Luma([1000]));
    assert!(matches!(detect_centers(&flat, 30.0), Err(RectificationError::NoGridFound(_))));
    let centers: Vec<(f64, f64)> =
        (0..8).flat_map(|j| (0..8).map(move |i| (20.0 + 35.0 * i as f64, 20.0 + 35.0 * j as f64))).collect();
    let img = render_discs(300, 300, &centers, 17.0);
    assert!(matches!(detect_centers(&img, 60.0), Err(RectificationError::AmbiguousPitch { .. })));
    assert!(matches!(detect_centers(&img, 3.0), Err(RectificationError::InvalidInput(_))));
}

#[test]
fn warp_with_identity_is_lossless() {
    let spec = small_spec();
    let image = synthesize_white_image(&spec, &spec.aligned_mla());
    let warped = warp_image(&image, &Matrix3::identity()).unwrap();
    assert_eq!(warped, image);
}
