//! Seeded simulate-then-calibrate trials, and sweeps over noise level and
//! pose count.

use serde::Serialize;

use crate::calibration::{CalibrationInput, CalibrationOptions, Termination};
use crate::io::GroundTruthFile;
use crate::projection::Distortion;
use crate::report::{evaluate, run_calibration, Evaluation, IntrinsicErrors};
use crate::simulator::{PoseEnvelope, Simulator, SimulatorError};
use crate::tpp::Tpp;

/// Simulate `n` poses of `sim` and return the sidecar and the calibration
/// input. `dist` gets its centers anchored to the ground truth.
pub fn simulate(
    sim: &Simulator,
    n: usize,
    seed: u64,
    sigma: f64,
    dist: &Distortion<f64>,
    envelope: &PoseEnvelope,
) -> Result<(GroundTruthFile, CalibrationInput), SimulatorError> {
    let poses = sim.generate_poses(n, seed, envelope)?;
    let dist = sim.anchored(dist);
    let observations = sim.synthesize_observations(&poses, &dist, sigma, seed);
    let setting = sim.spec.decode_setting();
    let truth = GroundTruthFile {
        spec: sim.spec,
        board: sim.board,
        truth: sim.truth,
        decode_setting: setting,
        decode: sim.truth.camera.decode_from_camera(&setting),
        engine: sim.engine,
        dist,
        sigma,
        seed,
        poses: poses.into_iter().enumerate().collect(),
    };
    Ok((truth, CalibrationInput { board: sim.calibration_board(), observations }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Calibrated { linear_max_intrinsic: f64, termination: Termination, evaluation: Evaluation },
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trial {
    pub seed: u64,
    pub poses: usize,
    pub sigma: f64,
    pub outcome: Outcome,
}

impl Trial {
    pub fn evaluation(&self) -> Option<&Evaluation> {
        match &self.outcome {
            Outcome::Calibrated { evaluation, .. } => Some(evaluation),
            Outcome::Failed { .. } => None,
        }
    }
}

/// Calibrate from the first `use_poses` of `input` and score the result.
pub fn run_trial(truth: &GroundTruthFile, input: &CalibrationInput, use_poses: usize) -> Trial {
    let ids: Vec<usize> = input.pose_ids().into_iter().take(use_poses).collect();
    let input = input.restricted_to(&ids);
    let options = CalibrationOptions::new(truth.spec.image_center());
    let outcome = match run_calibration(&input, &truth.decode_setting, &options) {
        Ok((report, _)) => {
            let evaluation = evaluate(&report.result, &report.board, truth).expect("simulated files are compatible");
            let linear = IntrinsicErrors::between(
                &Tpp::camera(report.linear.k_x, report.linear.k_u, report.linear.u_0, report.linear.v_0, report.linear.f),
                &truth.truth.camera,
            );
            Outcome::Calibrated {
                linear_max_intrinsic: linear.max(),
                termination: report.refinement.termination,
                evaluation,
            }
        }
        Err(e) => Outcome::Failed { error: e.to_string() },
    };
    Trial { seed: truth.seed, poses: ids.len(), sigma: truth.sigma, outcome }
}

/// Median; `None` entries (failed trials) count as `+∞`.
pub fn median(values: impl IntoIterator<Item = Option<f64>>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Medians over the trials of one sweep setting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub poses: usize,
    pub trials: usize,
    pub failures: usize,
    pub rms: f64,
    pub intrinsics: IntrinsicErrors,
    pub max_intrinsic: f64,
    pub rotation_deg: f64,
    pub translation: f64,
}

impl SweepRow {
    pub fn from_trials(trials: &[Trial]) -> Self {
        let evals: Vec<Option<&Evaluation>> = trials.iter().map(Trial::evaluation).collect();
        let m = |f: &dyn Fn(&Evaluation) -> f64| median(evals.iter().map(|e| e.map(f)));
        Self {
            sigma: trials.first().map_or(f64::NAN, |t| t.sigma),
            poses: trials.first().map_or(0, |t| t.poses),
            trials: trials.len(),
            failures: evals.iter().filter(|e| e.is_none()).count(),
            rms: m(&|e| e.rms),
            intrinsics: IntrinsicErrors {
                k_xy: m(&|e| e.intrinsics.k_xy),
                k_uv: m(&|e| e.intrinsics.k_uv),
                u_0: m(&|e| e.intrinsics.u_0),
                v_0: m(&|e| e.intrinsics.v_0),
                f: m(&|e| e.intrinsics.f),
            },
            max_intrinsic: m(&|e| e.max_intrinsic),
            rotation_deg: m(&|e| e.max_rotation_deg),
            translation: m(&|e| e.max_translation),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub trials: Vec<Trial>,
}

/// Calibration error against noise level, `poses` poses per trial.
pub fn noise_sweep(sim: &Simulator, sigmas: &[f64], seeds: &[u64], poses: usize) -> Result<Sweep, SimulatorError> {
    let envelope = PoseEnvelope::reference();
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for &sigma in sigmas {
        let mut trials = Vec::new();
        for &seed in seeds {
            let (truth, input) = simulate(sim, poses, seed, sigma, &Distortion::none(), &envelope)?;
            trials.push(run_trial(&truth, &input, poses));
        }
        rows.push(SweepRow::from_trials(&trials));
        all.extend(trials);
    }
    Ok(Sweep { rows, trials: all })
}

/// Calibration error against pose count. Each seed simulates the largest
/// count once and smaller counts use its leading poses.
pub fn pose_sweep(sim: &Simulator, counts: &[usize], seeds: &[u64], sigma: f64) -> Result<Sweep, SimulatorError> {
    let envelope = PoseEnvelope::reference();
    let n = counts.iter().copied().max().unwrap_or(0);
    let mut per_count: Vec<Vec<Trial>> = vec![Vec::new(); counts.len()];
    for &seed in seeds {
        let (truth, input) = simulate(sim, n, seed, sigma, &Distortion::none(), &envelope)?;
        for (k, &count) in counts.iter().enumerate() {
            per_count[k].push(run_trial(&truth, &input, count));
        }
    }
    let rows = per_count.iter().map(|t| SweepRow::from_trials(t)).collect();
    Ok(Sweep { rows, trials: per_count.into_iter().flatten().collect() })
}
