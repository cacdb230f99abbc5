mod common;

use cviro::baseline::{baseline_propagate, baseline_state, baseline_visual_update};
use cviro::pipeline::InitialSigma;
use cviro::propagation::{ImuSample, NoiseParams, GRAVITY};
use cviro::state::{ErrorParam, ImuBias, GATE_CONFIDENCE};
use cviro::visual::CameraExtrinsics;
use nalgebra::{Matrix3, Vector3};

fn hover(t_end: f64) -> Vec<ImuSample> {
    let n = (t_end * 100.0).round() as usize;
    (0..=n)
        .map(|k| ImuSample::new(k as f64 * 0.01, Vector3::zeros(), -GRAVITY))
        .collect()
}

#[test]
fn baseline_refuses_invariant_states() {
    let mut r = common::rng(3);
    let mut s = common::random_state(&mut r, ErrorParam::RightInvariant, 0, 2);
    let imu = hover(1.0);
    assert!(baseline_propagate(&mut s, &imu, 0.5, &NoiseParams::default()).is_err());
    let mut with_anchor = common::random_state(&mut r, ErrorParam::Vector, 1, 2);
    assert!(baseline_propagate(&mut with_anchor, &imu, 0.5, &NoiseParams::default()).is_err());
}

#[test]
fn hovering_baseline_grows_covariance_and_stays_put() {
    let mut s = baseline_state(
        0.0,
        Matrix3::identity(),
        Vector3::zeros(),
        Vector3::new(0.0, 0.0, 1.0),
        ImuBias::default(),
        InitialSigma::default().covariance(),
        11,
    )
    .unwrap();
    let p0 = s.covariance.clone();
    let imu = hover(2.0);
    baseline_propagate(&mut s, &imu, 2.0, &NoiseParams::default()).unwrap();
    assert!((s.position() - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-9);
    assert!(s.covariance[(6, 6)] > p0[(6, 6)]);
    assert!(s.covariance[(0, 0)] > p0[(0, 0)]);
    // Yaw variance grows only through gyro noise; with the vector error it
    // never couples into roll or pitch when hovering level.
    assert!(s.covariance[(0, 2)].abs() < 1e-12);
}

#[test]
fn visual_update_shrinks_pose_uncertainty() {
    let mut r = common::rng(21);
    let ext = CameraExtrinsics::default();
    let mut s = common::random_state(&mut r, ErrorParam::Vector, 0, 4);
    let n = s.dim();
    s.covariance = nalgebra::DMatrix::identity(n, n) * 1e-2;
    let (_, track) = common::visible_feature(&mut r, &mut s, &ext);
    let before = s.covariance.trace();
    let stats = baseline_visual_update(&mut s, &[track], &ext, 1.0 / 460.0, GATE_CONFIDENCE).unwrap();
    assert_eq!(stats.used, 1);
    assert!(s.covariance.trace() < before);
}
