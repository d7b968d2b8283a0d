//! Files: observation sets, ground-truth sidecars, residual CSV and 16-bit
//! PGM images. Every write goes to a temporary file that is then renamed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{GraymapHeader, PnmEncoder, PnmHeader, SampleEncoding};
use image::{ExtendedColorType, ImageFormat, ImageReader};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibrationInput;
use crate::projection::{sort_observations, Distortion, Observation, Residuals, RigidPose};
use crate::simulator::{BoardSpec, Engine, GroundTruth, PhysicalCameraSpec, WhiteImage};
use crate::tpp::Tpp;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    write_atomic(path, to_json(value).as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.to_path_buf(), source })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoardEntry {
    pub rows: usize,
    pub cols: usize,
    pub cell_mm: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationEntry {
    pub point_id: usize,
    pub lens: [i64; 2],
    pub pixel: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub id: usize,
    pub observations: Vec<ObservationEntry>,
}

/// Sensor facts needed to calibrate from a file: pixel pitch for the
/// mm-to-pixel conversion, resolution for the image center, and the decode
/// setting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub pixel_pitch_mm: f64,
    pub resolution: [usize; 2],
    pub decode_setting: Tpp<f64>,
}

impl CameraEntry {
    pub fn from_spec(spec: &PhysicalCameraSpec) -> Self {
        Self {
            pixel_pitch_mm: spec.pixel_pitch,
            resolution: [spec.sensor_resolution.0, spec.sensor_resolution.1],
            decode_setting: spec.decode_setting(),
        }
    }

    pub fn image_center(&self) -> (f64, f64) {
        (self.resolution[0] as f64 / 2.0, self.resolution[1] as f64 / 2.0)
    }
}

/// Observation set on disk. Board in mm, pixels in raw-image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationFile {
    pub board: BoardEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraEntry>,
    pub poses: Vec<PoseEntry>,
}

impl ObservationFile {
    /// Group `observations` by pose in canonical order.
    pub fn new(board: &BoardSpec, camera: Option<CameraEntry>, observations: &[Observation]) -> Self {
        let mut obs = observations.to_vec();
        sort_observations(&mut obs);
        let mut poses: BTreeMap<usize, Vec<ObservationEntry>> = BTreeMap::new();
        for o in obs {
            poses.entry(o.pose_id).or_default().push(ObservationEntry {
                point_id: o.point_id,
                lens: [o.lens_i, o.lens_j],
                pixel: [o.px, o.py],
            });
        }
        Self {
            board: BoardEntry { rows: board.rows, cols: board.cols, cell_mm: [board.cell.0, board.cell.1] },
            camera,
            poses: poses.into_iter().map(|(id, observations)| PoseEntry { id, observations }).collect(),
        }
    }

    pub fn board_spec(&self) -> BoardSpec {
        BoardSpec { rows: self.board.rows, cols: self.board.cols, cell: (self.board.cell_mm[0], self.board.cell_mm[1]) }
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.poses
            .iter()
            .flat_map(|p| {
                p.observations.iter().map(move |o| Observation {
                    pose_id: p.id,
                    point_id: o.point_id,
                    lens_i: o.lens[0],
                    lens_j: o.lens[1],
                    px: o.pixel[0],
                    py: o.pixel[1],
                })
            })
            .collect()
    }

    /// Same poses with every pixel replaced by `map(pixel)`.
    pub fn with_pixels<E>(&self, mut map: impl FnMut(usize, [f64; 2]) -> Result<[f64; 2], E>) -> Result<Self, E> {
        let mut out = self.clone();
        let mut k = 0;
        for pose in &mut out.poses {
            for o in &mut pose.observations {
                o.pixel = map(k, o.pixel)?;
                k += 1;
            }
        }
        Ok(out)
    }

    /// Structural problems: bad board, duplicate poses, unknown points,
    /// non-finite pixels.
    pub fn validate(&self) -> Result<(), String> {
        self.board_spec().validate().map_err(|e| e.to_string())?;
        let n = self.board.rows * self.board.cols;
        let mut ids = BTreeSet::new();
        for pose in &self.poses {
            if !ids.insert(pose.id) {
                return Err(format!("pose {} appears twice", pose.id));
            }
            for o in &pose.observations {
                if o.point_id >= n {
                    return Err(format!("pose {}: point {} is not on a {n}-point board", pose.id, o.point_id));
                }
                if !o.pixel.iter().all(|v| v.is_finite()) {
                    return Err(format!("pose {}: non-finite pixel", pose.id));
                }
            }
        }
        if let Some(c) = &self.camera {
            if !(c.pixel_pitch_mm > 0.0) || c.resolution.contains(&0) {
                return Err("camera block needs a positive pixel pitch and resolution".into());
            }
        }
        Ok(())
    }

    /// Calibration input with the board converted to pixel units.
    pub fn calibration_input(&self, pixel_pitch: f64) -> CalibrationInput {
        CalibrationInput { board: self.board_spec().to_board(pixel_pitch), observations: self.observations() }
    }
}

/// Everything needed to reproduce and score a simulated data set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub spec: PhysicalCameraSpec,
    pub board: BoardSpec,
    pub truth: GroundTruth,
    pub decode_setting: Tpp<f64>,
    /// Ground-truth camera relative to `decode_setting`.
    pub decode: Tpp<f64>,
    pub engine: Engine,
    pub dist: Distortion<f64>,
    pub sigma: f64,
    pub seed: u64,
    /// Board poses in the camera frame, pixel units.
    pub poses: BTreeMap<usize, RigidPose<f64>>,
}

/// Residual table with columns `pose_id,point_id,i,j,dx,dy`.
pub fn residual_csv(res: &Residuals) -> String {
    let mut s = String::from("pose_id,point_id,i,j,dx,dy\n");
    for (o, (dx, dy)) in res.observations.iter().zip(&res.values) {
        let _ = writeln!(s, "{},{},{},{},{},{}", o.pose_id, o.point_id, o.lens_i, o.lens_j, dx, dy);
    }
    s
}

pub fn write_residual_csv(path: &Path, res: &Residuals) -> Result<(), IoError> {
    write_atomic(path, residual_csv(res).as_bytes())
}

/// Binary 16-bit PGM (P5).
pub fn write_pgm16(path: &Path, image: &WhiteImage) -> Result<(), IoError> {
    let mut bytes = Vec::new();
    PnmEncoder::new(&mut bytes)
        .with_header(PnmHeader::from(GraymapHeader {
            encoding: SampleEncoding::Binary,
            width: image.width(),
            height: image.height(),
            maxwhite: u16::MAX as u32,
        }))
        .encode(image.as_raw().as_slice(), image.width(), image.height(), ExtendedColorType::L16)
        .map_err(|source| IoError::Image { path: path.to_path_buf(), source })?;
    write_atomic(path, &bytes)
}

/// Read any PNM graymap; 8-bit data is widened to 16 bits.
pub fn read_pgm(path: &Path) -> Result<WhiteImage, IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let image = ImageReader::with_format(BufReader::new(file), ImageFormat::Pnm)
        .decode()
        .map_err(|source| IoError::Image { path: path.to_path_buf(), source })?;
    Ok(image.into_luma16())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::render_discs;

    fn sample() -> Vec<Observation> {
        vec![
            Observation { pose_id: 1, point_id: 0, lens_i: -2, lens_j: 5, px: 10.125, py: 0.1 + 0.2 },
            Observation { pose_id: 0, point_id: 3, lens_i: 0, lens_j: 0, px: -1e-300, py: 4008.0 },
            Observation { pose_id: 0, point_id: 1, lens_i: 7, lens_j: -1, px: 1.0 / 3.0, py: 2.5 },
        ]
    }

    #[test]
    fn observation_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.json");
        let board = BoardSpec { rows: 2, cols: 2, cell: (54.0, 27.5) };
        let camera = CameraEntry::from_spec(&PhysicalCameraSpec::reference());
        let file = ObservationFile::new(&board, Some(camera), &sample());
        assert_eq!(file.poses.iter().map(|p| p.id).collect::<Vec<_>>(), vec![0, 1]);
        write_json(&path, &file).unwrap();
        let back: ObservationFile = read_json(&path).unwrap();
        assert_eq!(back, file);
        assert!(back.validate().is_ok());
        let mut expected = sample();
        sort_observations(&mut expected);
        assert_eq!(back.observations(), expected);
        let input = back.calibration_input(0.5);
        assert_eq!(input.board.cell, (108.0, 55.0));
        write_json(&path, &back).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), to_json(&file));
    }

    #[test]
    fn schema_without_camera_block() {
        let text = r#"{"board": {"rows": 5, "cols": 5, "cell_mm": [54, 54]},
            "poses": [{"id": 4, "observations": [{"point_id": 24, "lens": [1, -2], "pixel": [3.5, 4]}]}]}"#;
        let file: ObservationFile = serde_json::from_str(text).unwrap();
        assert!(file.camera.is_none());
        assert!(file.validate().is_ok());
        let o = file.observations()[0];
        assert_eq!((o.pose_id, o.point_id, o.lens_i, o.lens_j, o.px, o.py), (4, 24, 1, -2, 3.5, 4.0));
        assert!(!to_json(&file).contains("camera"));
    }

    #[test]
    fn validation_catches_bad_files() {
        let board = BoardSpec { rows: 2, cols: 2, cell: (1.0, 1.0) };
        let mut file = ObservationFile::new(&board, None, &sample());
        file.poses[0].observations[0].point_id = 4;
        assert!(file.validate().unwrap_err().contains("point 4"));
        let mut file = ObservationFile::new(&board, None, &sample());
        file.poses[1].id = 0;
        assert!(file.validate().unwrap_err().contains("twice"));
        let mut file = ObservationFile::new(&board, None, &sample());
        file.poses[1].observations[0].pixel[0] = f64::NAN;
        assert!(file.validate().is_err());
    }

    #[test]
    fn residual_csv_layout() {
        let obs = sample();
        let res = Residuals { values: vec![(0.5, -0.25); 3], observations: obs, rms: 0.0 };
        let csv = residual_csv(&res);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "pose_id,point_id,i,j,dx,dy");
        assert_eq!(lines[1], "1,0,-2,5,0.5,-0.25");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.pgm");
        let image = render_discs(64, 48, &[(20.0, 20.0), (40.5, 30.25)], 8.0);
        write_pgm16(&path, &image).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(read_pgm(&path).unwrap(), image);
    }

    #[test]
    fn eight_bit_pgm_is_widened() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("small.pgm");
        let mut bytes = b"P5\n3 1\n255\n".to_vec();
        bytes.extend([0u8, 128, 255]);
        fs::write(&path, bytes).unwrap();
        let image = read_pgm(&path).unwrap();
        assert_eq!(image.as_raw(), &vec![0u16, 128 * 257, 65535]);
    }

    #[test]
    fn missing_files_report_their_path() {
        let err = read_pgm(Path::new("/nonexistent/white.pgm")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/white.pgm"));
        assert!(read_json::<ObservationFile>(Path::new("/nonexistent/o.json")).is_err());
    }
}
