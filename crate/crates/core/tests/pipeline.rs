use plenocal::calibration::{calibrate, linear_result, CalibrationInput, CalibrationOptions};
use plenocal::projection::Distortion;
use plenocal::simulator::{PoseEnvelope, Simulator};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn noise_free_loop_closure() {
    let sim = Simulator::reference();
    let poses = sim.generate_poses(12, 1, &PoseEnvelope::reference()).unwrap();
    let obs = sim.synthesize_observations(&poses, &Distortion::none(), 0.0, 1);
    let input = CalibrationInput { board: sim.calibration_board(), observations: obs };
    let setting = sim.spec.decode_setting();
    let options = CalibrationOptions::new(sim.spec.image_center());
    let truth = sim.truth.camera;
    let (_, lin) = linear_result(&input, &setting, &options).unwrap();
    let (res, rep) = calibrate(&input, &setting, &options).unwrap();
    for tpp in [lin.tpp, res.tpp] {
        for (a, b) in [(tpp.k_x, truth.k_x), (tpp.k_u, truth.k_u), (tpp.u_0, truth.u_0), (tpp.v_0, truth.v_0), (tpp.f, truth.f)] {
            assert!(rel(a, b) < 1e-6, "{a} vs {b}");
        }
    }
    assert!(rep.final_rms < 1e-6);
    // the decode-relative values themselves depend on the setting
    let other = plenocal::tpp::Tpp::isotropic(0.5, 30.0, 1500.0, 1000.0, 400.0, 400.0);
    let (res2, _) = calibrate(&input, &other, &options).unwrap();
    assert!(rel(res2.tpp.f, truth.f) < 1e-6 && rel(res2.tpp.u_0, truth.u_0) < 1e-6);
    assert!(rel(res2.decode.k_x, res.decode.k_x) > 0.1);
}
