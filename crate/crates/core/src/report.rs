//! Calibration reports and their comparison with ground truth.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::board::Board;
use crate::calibration::{linear_result, refine, CalibrationError, CalibrationInput, CalibrationOptions, CalibrationResult, RefineReport};
use crate::io::GroundTruthFile;
use crate::projection::{residuals, sort_observations, Residuals};
use crate::rotation::{angle_between, rodrigues};
use crate::tpp::Tpp;

/// One column of a calibration table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterTable {
    pub k_x: f64,
    pub k_y: f64,
    pub k_u: f64,
    pub k_v: f64,
    pub u_0: f64,
    pub v_0: f64,
    pub f: f64,
    pub s1: f64,
    pub s2: f64,
    pub t1: f64,
    pub t2: f64,
    pub rms: f64,
}

impl ParameterTable {
    /// Metric camera model of `result`.
    pub fn from_result(result: &CalibrationResult) -> Self {
        let (c, d) = (&result.tpp, &result.dist);
        Self {
            k_x: c.k_x,
            k_y: c.k_y,
            k_u: c.k_u,
            k_v: c.k_v,
            u_0: c.u_0,
            v_0: c.v_0,
            f: c.f,
            s1: d.s1,
            s2: d.s2,
            t1: d.t1,
            t2: d.t2,
            rms: result.rms,
        }
    }

    fn rows(&self) -> [(&'static str, f64); 12] {
        [
            ("k_x", self.k_x),
            ("k_y", self.k_y),
            ("k_u", self.k_u),
            ("k_v", self.k_v),
            ("u_0/pixel", self.u_0),
            ("v_0/pixel", self.v_0),
            ("f/pixel", self.f),
            ("s_1", self.s1),
            ("s_2", self.s2),
            ("t_1", self.t1),
            ("t_2", self.t2),
            ("RMS", self.rms),
        ]
    }
}

/// Output of a calibration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub board: Board,
    pub linear: ParameterTable,
    pub refined: ParameterTable,
    /// Refined result.
    pub result: CalibrationResult,
    pub refinement: RefineReport,
    pub pose_rms: BTreeMap<usize, f64>,
}

impl CalibrationReport {
    /// Two-column text table, linear and refined.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>16} {:>16}\n", "parameter", "linear", "refined");
        for ((name, a), (_, b)) in self.linear.rows().iter().zip(self.refined.rows()) {
            let _ = writeln!(s, "{name:<10} {:>16} {:>16}", format_value(*a), format_value(b));
        }
        s
    }
}

fn format_value(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() < 1e-3 || v.abs() >= 1e7 {
        format!("{v:.3e}")
    } else {
        format!("{v:.5}")
    }
}

/// Linear stage, refinement and residuals.
pub fn run_calibration(
    input: &CalibrationInput,
    setting: &Tpp<f64>,
    options: &CalibrationOptions,
) -> Result<(CalibrationReport, Residuals), CalibrationError> {
    let mut input = input.clone();
    sort_observations(&mut input.observations);
    let (_, linear) = linear_result(&input, setting, options)?;
    let (result, refinement) = refine(&linear, &input, options)?;
    let poses: HashMap<_, _> = result.poses.iter().map(|(k, v)| (*k, *v)).collect();
    let res = residuals(&input.observations, &input.board.points(), &poses, &result.decode, &result.setting, &result.dist)?;
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (o, (dx, dy)) in res.observations.iter().zip(&res.values) {
        let e = sums.entry(o.pose_id).or_default();
        e.0 += dx * dx + dy * dy;
        e.1 += 2;
    }
    let report = CalibrationReport {
        board: input.board,
        linear: ParameterTable::from_result(&linear),
        refined: ParameterTable::from_result(&result),
        result,
        refinement,
        pose_rms: sums.into_iter().map(|(k, (s, n))| (k, (s / n as f64).sqrt())).collect(),
    };
    Ok((report, res))
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("result and ground truth are not comparable: {0}")]
pub struct GaugeMismatch(pub String);

/// Relative errors of the isotropic camera parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicErrors {
    pub k_xy: f64,
    pub k_uv: f64,
    pub u_0: f64,
    pub v_0: f64,
    pub f: f64,
}

impl IntrinsicErrors {
    pub fn between(estimate: &Tpp<f64>, truth: &Tpp<f64>) -> Self {
        Self {
            k_xy: relative(estimate.k_x, truth.k_x),
            k_uv: relative(estimate.k_u, truth.k_u),
            u_0: relative(estimate.u_0, truth.u_0),
            v_0: relative(estimate.v_0, truth.v_0),
            f: relative(estimate.f, truth.f),
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [self.k_xy, self.k_uv, self.u_0, self.v_0, self.f]
    }

    pub fn max(&self) -> f64 {
        self.values().into_iter().fold(0.0, f64::max)
    }
}

/// `|a - b| / |b|`, or `|a|` when `b` is zero.
pub fn relative(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        (a - b).abs() / b.abs()
    }
}

/// Errors of a calibration against simulated ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub intrinsics: IntrinsicErrors,
    pub max_intrinsic: f64,
    /// Relative errors of `s1, s2, t1, t2`; absolute where the truth is 0.
    pub distortion: [f64; 4],
    /// Geodesic rotation error per pose, degrees.
    pub rotation_deg: BTreeMap<usize, f64>,
    /// `‖t - t_true‖ / ‖t_true‖` per pose.
    pub translation: BTreeMap<usize, f64>,
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    pub rms: f64,
}

/// Compare a calibration with the ground truth it was simulated from.
pub fn evaluate(result: &CalibrationResult, board: &Board, truth: &GroundTruthFile) -> Result<Evaluation, GaugeMismatch> {
    let expected = truth.board.to_board(truth.spec.pixel_pitch);
    let same_board = board.rows == expected.rows
        && board.cols == expected.cols
        && relative(board.cell.0, expected.cell.0) < 1e-9
        && relative(board.cell.1, expected.cell.1) < 1e-9;
    if !same_board {
        return Err(GaugeMismatch(format!(
            "board {}×{} with {:?} px cells, ground truth has {}×{} with {:?}",
            board.rows, board.cols, board.cell, expected.rows, expected.cols, expected.cell
        )));
    }
    if let Some(id) = result.poses.keys().find(|id| !truth.poses.contains_key(id)) {
        return Err(GaugeMismatch(format!("pose {id} is not in the ground truth")));
    }
    if result.tpp.validate().is_err() || result.setting.validate().is_err() {
        return Err(GaugeMismatch("result holds an invalid parameter set".into()));
    }
    let intrinsics = IntrinsicErrors::between(&result.tpp, &truth.truth.camera);
    let (d, t) = (&result.dist, &truth.dist);
    let mut rotation_deg = BTreeMap::new();
    let mut translation = BTreeMap::new();
    for (id, pose) in &result.poses {
        let gt = &truth.poses[id];
        let angle = angle_between(&rodrigues(&pose.rotation), &rodrigues(&gt.rotation));
        rotation_deg.insert(*id, angle.to_degrees());
        translation.insert(*id, (pose.translation - gt.translation).norm() / gt.translation.norm());
    }
    Ok(Evaluation {
        intrinsics,
        max_intrinsic: intrinsics.max(),
        distortion: [relative(d.s1, t.s1), relative(d.s2, t.s2), relative(d.t1, t.t1), relative(d.t2, t.t2)],
        max_rotation_deg: rotation_deg.values().copied().fold(0.0, f64::max),
        max_translation: translation.values().copied().fold(0.0, f64::max),
        rotation_deg,
        translation,
        rms: result.rms,
    })
}
