//! End-to-end runs of the `plenocal` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn plenocal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plenocal"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn simulate(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["simulate", "--out", s(&out)];
    args.extend_from_slice(extra);
    let run = plenocal(&args);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    out
}

#[test]
fn simulate_writes_observations_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(dir.path(), "sim", &["--seed", "3"]);
    let obs = json(&out.join("observations.json"));
    assert_eq!(obs["poses"].as_array().unwrap().len(), 12);
    assert_eq!(obs["board"]["cell_mm"], serde_json::json!([54.0, 54.0]));
    let first = &obs["poses"][0]["observations"][0];
    assert!(first["lens"].is_array() && first["pixel"].is_array() && first["point_id"].is_u64());
    let truth = json(&out.join("ground_truth.json"));
    assert_eq!(truth["seed"], 3);
    assert!(truth["truth"]["camera"]["k_u"].as_f64().unwrap() > 0.0);
    assert_eq!(truth["truth"]["frame"]["sign_z"], -1.0);
    let cfg = json(&out.join("simulate.config.json"));
    assert_eq!((cfg["seed"].as_u64(), cfg["poses"].as_u64()), (Some(3), Some(12)));
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "a", &["--seed", "9", "--sigma", "0.2", "--poses", "4"]);
    let b = simulate(dir.path(), "b", &["--seed", "9", "--sigma", "0.2", "--poses", "4"]);
    for name in ["observations.json", "ground_truth.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let c = simulate(dir.path(), "c", &["--seed", "10", "--sigma", "0.2", "--poses", "4"]);
    assert_ne!(fs::read(a.join("observations.json")).unwrap(), fs::read(c.join("observations.json")).unwrap());
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&plenocal(&["simulate", "--poses", "0", "--out", s(&out)])), 2);
    assert_eq!(code(&plenocal(&["simulate", "--sigma", "-1", "--out", s(&out)])), 2);
    let bad = write_config(dir.path(), "bad.json", r#"{"poses": 3, "unknown_field": 1}"#);
    let run = plenocal(&["simulate", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(code(&run), 2);
    assert!(stderr(&run).contains("unknown_field"));
    assert_eq!(code(&plenocal(&["calibrate", s(&dir.path().join("missing.json"))])), 2);
    assert_eq!(code(&plenocal(&["frobnicate"])), 2);
}

#[test]
fn infeasible_envelope_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "far.json",
        r#"{"envelope": {"distance": [55.0, 55.0], "tilt": [0.0, 0.0], "max_roll": 0.0,
            "max_rotation": 0.0, "lateral": [0.0, 0.0], "min_visible_fraction": 0.5, "max_rejections": 5}}"#,
    );
    let run = plenocal(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&run), 3, "{}", stderr(&run));
}

#[test]
fn noise_free_calibration_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "sim", &["--seed", "1", "--poses", "5"]);
    let out = dir.path().join("cal");
    let run = plenocal(&["calibrate", s(&sim.join("observations.json")), "--out", s(&out)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let table = String::from_utf8_lossy(&run.stdout);
    assert!(table.contains("k_x") && table.contains("RMS"));
    let report = json(&out.join("calibration.json"));
    assert!(report["refined"]["rms"].as_f64().unwrap() < 1e-6);
    assert!(report["linear"]["k_u"].as_f64().is_some());
    assert_eq!(report["result"]["poses"].as_object().unwrap().len(), 5);
    let bins = report["result"]["residual_histogram"].as_array().unwrap();
    let total: u64 = bins.iter().map(|b| b[1].as_u64().unwrap()).sum();
    assert_eq!(total, report["result"]["observation_count"].as_u64().unwrap());
    let csv = fs::read_to_string(out.join("residuals.csv")).unwrap();
    assert!(csv.starts_with("pose_id,point_id,i,j,dx,dy\n"));
    assert_eq!(csv.lines().count() as u64, total + 1);

    let eval = dir.path().join("eval");
    let run = plenocal(&["evaluate", s(&out.join("calibration.json")), s(&sim.join("ground_truth.json")), "--out", s(&eval)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let metrics = json(&eval.join("metrics.json"));
    assert!(metrics["max_intrinsic"].as_f64().unwrap() < 1e-6);
    assert!(metrics["max_rotation_deg"].as_f64().unwrap() < 1e-6);
}

#[test]
fn fixed_fprime_and_free_centers_keep_the_camera() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "sim", &["--seed", "2", "--poses", "4"]);
    let obs = sim.join("observations.json");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&plenocal(&["calibrate", s(&obs), "--out", s(&a)])), 0);
    let run = plenocal(&["calibrate", s(&obs), "--out", s(&b), "--fixed-fprime", "500", "--optimize-distortion-centers"]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let (ra, rb) = (json(&a.join("calibration.json")), json(&b.join("calibration.json")));
    assert_eq!(rb["result"]["setting"]["f_prime"], 500.0);
    for key in ["k_x", "k_u", "u_0", "v_0", "f"] {
        let (x, y) = (ra["refined"][key].as_f64().unwrap(), rb["refined"][key].as_f64().unwrap());
        assert!((x - y).abs() <= 1e-6 * x.abs(), "{key}: {x} vs {y}");
    }
    assert_eq!(json(&b.join("calibrate.config.json"))["center_policy"], "free");
}

#[test]
fn noisy_calibration_rms_tracks_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "sim", &["--seed", "5", "--sigma", "0.3"]);
    let out = dir.path().join("cal");
    let run = plenocal(&["calibrate", s(&sim.join("observations.json")), "--out", s(&out)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let rms = json(&out.join("calibration.json"))["refined"]["rms"].as_f64().unwrap();
    assert!((0.24..=0.36).contains(&rms), "rms {rms}");
}

#[test]
fn two_poses_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "sim", &["--poses", "2"]);
    let run = plenocal(&["calibrate", s(&sim.join("observations.json")), "--out", s(&dir.path().join("cal"))]);
    assert_eq!(code(&run), 4);
    assert!(stderr(&run).contains("InsufficientPoses"), "{}", stderr(&run));
}

#[test]
fn mismatched_ground_truth_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "sim", &["--poses", "3"]);
    let cal = dir.path().join("cal");
    assert_eq!(code(&plenocal(&["calibrate", s(&sim.join("observations.json")), "--out", s(&cal)])), 0);
    let cfg = write_config(
        dir.path(),
        "board.json",
        r#"{"board": {"rows": 4, "cols": 5, "cell": [54.0, 54.0]}}"#,
    );
    let other = dir.path().join("other");
    assert_eq!(code(&plenocal(&["simulate", "--config", s(&cfg), "--poses", "3", "--out", s(&other)])), 0);
    let run = plenocal(&[
        "evaluate",
        s(&cal.join("calibration.json")),
        s(&other.join("ground_truth.json")),
        "--out",
        s(&dir.path().join("eval")),
    ]);
    assert_eq!(code(&run), 5, "{}", stderr(&run));
}

#[test]
fn aligned_white_image_gives_identity() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "sim", &["--poses", "3", "--white-image"]);
    let out = dir.path().join("rect");
    let run = plenocal(&["rectify", s(&sim.join("white.pgm")), s(&sim.join("observations.json")), "--out", s(&out)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let h = json(&out.join("homography.json"));
    let m: Vec<f64> = h["homography"]["matrix"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    // column-major: entries 6 and 7 are the translation in pixels
    for (k, (a, b)) in m.iter().zip(identity).enumerate() {
        let tol = if k == 6 || k == 7 { 1e-2 } else { 1e-5 };
        assert!((a - b).abs() < tol, "{m:?}");
    }
    let before = json(&sim.join("observations.json"));
    let after = json(&out.join("rectified_observations.json"));
    let (p, q) = (&before["poses"][0]["observations"][0]["pixel"], &after["poses"][0]["observations"][0]["pixel"]);
    assert!((p[0].as_f64().unwrap() - q[0].as_f64().unwrap()).abs() < 0.05);
    let centers = out.join("centers.json");
    let again = dir.path().join("again");
    let run = plenocal(&["rectify", s(&centers), s(&sim.join("observations.json")), "--out", s(&again)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    assert_eq!(fs::read(out.join("homography.json")).unwrap(), fs::read(again.join("homography.json")).unwrap());
}

#[test]
fn missing_grid_exits_6() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "sim", &["--poses", "3"]);
    let flat = dir.path().join("flat.pgm");
    let mut bytes = b"P5\n200 100\n255\n".to_vec();
    bytes.extend(std::iter::repeat_n(200u8, 200 * 100));
    fs::write(&flat, bytes).unwrap();
    let obs = sim.join("observations.json");
    let out = dir.path().join("rect");
    assert_eq!(code(&plenocal(&["rectify", s(&flat), s(&obs), "--out", s(&out)])), 6);
    assert_eq!(code(&plenocal(&["rectify", s(&dir.path().join("none.pgm")), s(&obs), "--out", s(&out)])), 6);
}

#[test]
fn in_plane_misalignment_is_rectified() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "rot.json", r#"{"misalignment": {"rotation_deg": [0.0, 0.0, 0.5]}}"#);
    let common = ["--seed", "1", "--sigma", "0.1"];
    let aligned = simulate(dir.path(), "aligned", &common);
    let mut args = vec!["--config", s(&cfg), "--white-image"];
    args.extend_from_slice(&common);
    let tilted = simulate(dir.path(), "tilted", &args);
    let rect = dir.path().join("rect");
    let run =
        plenocal(&["rectify", s(&tilted.join("white.pgm")), s(&tilted.join("observations.json")), "--out", s(&rect)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let summary = json(&rect.join("homography.json"));
    assert!(summary["homography"]["rms"].as_f64().unwrap() < 0.05);
    let calibrate = |obs: PathBuf, name: &str| {
        let out = dir.path().join(name);
        let run = plenocal(&["calibrate", s(&obs), "--out", s(&out)]);
        assert_eq!(code(&run), 0, "{}", stderr(&run));
        json(&out.join("calibration.json"))["refined"].clone()
    };
    let reference = calibrate(aligned.join("observations.json"), "cal_aligned");
    let rectified = calibrate(rect.join("rectified_observations.json"), "cal_rect");
    assert!(rectified["rms"].as_f64().unwrap() < 0.12);
    for key in ["k_x", "k_u", "u_0", "v_0", "f"] {
        let (a, b) = (reference[key].as_f64().unwrap(), rectified[key].as_f64().unwrap());
        assert!((a - b).abs() < 0.01 * a.abs(), "{key}: {a} vs {b}");
    }
}
