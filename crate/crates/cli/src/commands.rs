//! The four subcommands.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use log::{info, warn};
use plenocal::calibration::CalibrationOptions;
use plenocal::experiments;
use plenocal::io::{
    read_json, read_pgm, write_json, write_pgm16, write_residual_csv, CameraEntry, GroundTruthFile, IoError,
    ObservationFile,
};
use plenocal::projection::Distortion;
use plenocal::rectification::{
    apply_homography, detect_centers, estimate_rectifying_homography, map_centers, row_slopes, slope_range,
    MicroImageCenter, RectificationError, RectifyingHomography,
};
use plenocal::report::{evaluate as score, run_calibration, CalibrationReport};
use plenocal::simulator::{synthesize_white_image, Engine, Simulator};
use serde::Serialize;

use crate::config::RunConfig;

pub const EXIT_IO: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_GENERATION: u8 = 3;
pub const EXIT_CALIBRATION: u8 = 4;
pub const EXIT_GAUGE: u8 = 5;
pub const EXIT_DETECTION: u8 = 6;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Display) -> Self {
        Self { code, message: message.to_string() }
    }

    pub fn config(message: impl Display) -> Self {
        Self::new(EXIT_CONFIG, message)
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Self::new(EXIT_IO, e)
    }
}

fn detection(e: RectificationError) -> Failure {
    Failure::new(EXIT_DETECTION, format!("rectification failed: {e} ({e:?})"))
}

/// Create the output directory and record the resolved configuration.
fn prepare(cfg: &RunConfig, command: &str) -> Result<PathBuf, Failure> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", cfg.out.display())))?;
    write_json(&cfg.out.join(format!("{command}.config.json")), cfg)?;
    Ok(cfg.out.clone())
}

fn input(cfg: &RunConfig, k: usize) -> &Path {
    &cfg.inputs[k]
}

fn read_input<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    read_json(path).map_err(Failure::config)
}

pub fn simulate(cfg: &RunConfig) -> Result<(), Failure> {
    if cfg.poses == 0 {
        return Err(Failure::config("at least one pose is required"));
    }
    let mut sim = Simulator::new(cfg.camera, cfg.board).map_err(Failure::config)?;
    let d = cfg.distortion;
    let dist = Distortion { s1: d.s1, s2: d.s2, t1: d.t1, t2: d.t2, ..Distortion::none() };
    if let Some(m) = &cfg.misalignment {
        if !dist.is_zero() {
            return Err(Failure::config("distortion cannot be combined with a misaligned MLA"));
        }
        let mla = m.apply(&cfg.camera);
        mla.validate().map_err(Failure::config)?;
        sim = sim.with_misalignment(mla);
    }
    let out = prepare(cfg, "simulate")?;
    let (truth, data) = experiments::simulate(&sim, cfg.poses, cfg.seed, cfg.sigma, &dist, &cfg.envelope)
        .map_err(|e| Failure::new(EXIT_GENERATION, format!("simulation failed: {e}")))?;
    if data.observations.is_empty() {
        warn!("no board point is visible; the observation file is empty");
    }
    let file = ObservationFile::new(&cfg.board, Some(CameraEntry::from_spec(&cfg.camera)), &data.observations);
    write_json(&out.join("observations.json"), &file)?;
    write_json(&out.join("ground_truth.json"), &truth)?;
    if cfg.white_image {
        let mla = match sim.engine {
            Engine::Physical(mla) => mla,
            Engine::Tpp => cfg.camera.aligned_mla(),
        };
        write_pgm16(&out.join("white.pgm"), &synthesize_white_image(&cfg.camera, &mla))?;
    }
    info!("simulated {} observations over {} poses into {}", data.observations.len(), cfg.poses, out.display());
    Ok(())
}

#[derive(Serialize)]
struct RectificationSummary {
    homography: RectifyingHomography,
    centers: usize,
    slope_range_before: f64,
    slope_range_after: f64,
}

fn load_centers(cfg: &RunConfig, path: &Path) -> Result<Vec<MicroImageCenter>, Failure> {
    let is_image = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "pnm"));
    if is_image {
        let image = read_pgm(path).map_err(|e| Failure::new(EXIT_DETECTION, e))?;
        let pitch = cfg.expected_pitch_px.unwrap_or_else(|| cfg.camera.micro_image_pitch_px());
        detect_centers(&image, pitch).map_err(detection)
    } else {
        read_json(path).map_err(|e| Failure::new(EXIT_DETECTION, e))
    }
}

pub fn rectify(cfg: &RunConfig) -> Result<(), Failure> {
    let observations: ObservationFile = read_input(input(cfg, 1))?;
    observations.validate().map_err(Failure::config)?;
    let centers = load_centers(cfg, input(cfg, 0))?;
    let before = slope_range(&row_slopes(&centers).map_err(detection)?);
    let h = estimate_rectifying_homography(&centers, None).map_err(detection)?;
    let after = slope_range(&row_slopes(&map_centers(&centers, &h.matrix).map_err(detection)?).map_err(detection)?);
    info!(
        "{} centers, row slope range {before:.3e} before and {after:.3e} after rectification, fit rms {:.4} px",
        centers.len(),
        h.rms
    );
    let rectified = observations
        .with_pixels(|k, p| {
            apply_homography(&h.matrix, (p[0], p[1]))
                .map(|q| [q.0, q.1])
                .ok_or(RectificationError::PointAtInfinity(k))
        })
        .map_err(detection)?;
    let out = prepare(cfg, "rectify")?;
    write_json(&out.join("centers.json"), &centers)?;
    write_json(
        &out.join("homography.json"),
        &RectificationSummary { homography: h, centers: centers.len(), slope_range_before: before, slope_range_after: after },
    )?;
    write_json(&out.join("rectified_observations.json"), &rectified)?;
    Ok(())
}

pub fn calibrate(cfg: &RunConfig) -> Result<(), Failure> {
    let file: ObservationFile = read_input(input(cfg, 0))?;
    file.validate().map_err(Failure::config)?;
    let camera = file.camera.unwrap_or_else(|| {
        info!("observation file has no camera block; using the configured camera");
        CameraEntry::from_spec(&cfg.camera)
    });
    let mut setting = cfg.decode_setting.unwrap_or(camera.decode_setting);
    if let Some(f) = cfg.fixed_fprime {
        setting.f_prime = f;
    }
    setting.validate().map_err(Failure::config)?;
    let options = CalibrationOptions { image_center: camera.image_center(), center_policy: cfg.center_policy, refine: cfg.refine };
    let data = file.calibration_input(camera.pixel_pitch_mm);
    let out = prepare(cfg, "calibrate")?;
    let (report, residuals) = run_calibration(&data, &setting, &options)
        .map_err(|e| Failure::new(EXIT_CALIBRATION, format!("calibration failed: {e} ({e:?})")))?;
    write_json(&out.join("calibration.json"), &report)?;
    write_residual_csv(&out.join("residuals.csv"), &residuals)?;
    print!("{}", report.table());
    info!(
        "{} observations, {} poses, rms {:.5} px after {} iterations ({:?})",
        report.result.observation_count,
        report.result.poses.len(),
        report.result.rms,
        report.refinement.iterations,
        report.refinement.termination
    );
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), Failure> {
    let report: CalibrationReport = read_input(input(cfg, 0))?;
    let truth: GroundTruthFile = read_input(input(cfg, 1))?;
    let metrics = score(&report.result, &report.board, &truth).map_err(|e| Failure::new(EXIT_GAUGE, e))?;
    let out = prepare(cfg, "evaluate")?;
    write_json(&out.join("metrics.json"), &metrics)?;
    let i = &metrics.intrinsics;
    println!(
        "relative errors: k_xy {:.3e}  k_uv {:.3e}  u_0 {:.3e}  v_0 {:.3e}  f {:.3e}",
        i.k_xy, i.k_uv, i.u_0, i.v_0, i.f
    );
    println!(
        "largest pose errors: rotation {:.3e} deg, translation {:.3e}",
        metrics.max_rotation_deg, metrics.max_translation
    );
    Ok(())
}
