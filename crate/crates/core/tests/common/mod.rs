//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use cviro::liegroup::exp_so3;
use cviro::propagation::kinematic_step;
use cviro::range::{range_jacobian, range_predict, RangeMeasurement, UwbExtrinsics};
use cviro::state::{error_vector, ErrorParam, FilterState, ImuBias};
use cviro::visual::{project, visual_jacobians, BearingObservation, CameraExtrinsics, FeatureTrack};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn vec3(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    )
}

pub fn rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = vec3(rng, 1.0).normalize();
    exp_so3(&(axis * rng.random_range(0.0..3.0)))
}

/// Random state with `anchors` anchors and `clones` random clones.
pub fn random_state(rng: &mut ChaCha8Rng, param: ErrorParam, anchors: usize, clones: usize) -> FilterState {
    let bias = ImuBias {
        gyro: vec3(rng, 0.05),
        accel: vec3(rng, 0.2),
    };
    let mut s = FilterState::new(
        param,
        0.0,
        rotation(rng),
        vec3(rng, 3.0),
        vec3(rng, 5.0),
        bias,
        DMatrix::identity(15, 15) * 1e-2,
        clones.max(2),
    )
    .unwrap();
    for a in 0..anchors {
        let n = s.dim();
        s.insert_anchor(
            a,
            vec3(rng, 10.0),
            &DMatrix::identity(3, 3),
            &DMatrix::zeros(3, n),
        )
        .unwrap();
    }
    for k in 0..clones {
        s.augment_clone(k as f64);
    }
    for c in s.clones.iter_mut() {
        c.rotation = rotation(rng);
        c.position = vec3(rng, 5.0);
    }
    s
}

fn relative(fd: &DMatrix<f64>, an: &DMatrix<f64>) -> f64 {
    (fd - an).amax() / an.amax().max(1.0)
}

/// Propagates the mean with constant raw IMU inputs for a signed interval.
fn drift(s: &FilterState, gyro: &Vector3<f64>, accel: &Vector3<f64>, h: f64) -> FilterState {
    let mut out = s.clone();
    let w = gyro - s.bias.gyro;
    let a = accel - s.bias.accel;
    let (r, v, p) = kinematic_step(s.rotation(), s.velocity(), s.position(), &w, &w, &a, &a, h);
    out.core.rotation = r;
    out.core.columns[0] = v;
    out.core.columns[1] = p;
    out
}

/// Largest relative gap between the analytic `F` and central differences of
/// the error dynamics, perturbing along every error-state direction.
pub fn transition_oracle(s: &FilterState, gyro: &Vector3<f64>, accel: &Vector3<f64>) -> f64 {
    let n = s.imu_dim();
    let (f, _) = cviro::propagation::error_jacobians(s, &(accel - s.bias.accel));
    let (eps, h) = (1e-5, 1e-4);
    let mut fd = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut col = DVector::zeros(n);
        for (sign_e, sign_h) in [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
            let mut d = DVector::zeros(n);
            d[i] = sign_e * eps;
            let mut truth = s.clone();
            truth.apply_correction(&d);
            let e = error_vector(
                &drift(s, gyro, accel, sign_h * h),
                &drift(&truth, gyro, accel, sign_h * h),
            )
            .unwrap();
            col += e * (sign_e * sign_h / (4.0 * eps * h));
        }
        fd.set_column(i, &col);
    }
    relative(&fd, &f)
}

/// Relative gap of the range row against central differences.
pub fn range_oracle(s: &FilterState, e: &UwbExtrinsics, anchor_id: usize) -> f64 {
    let m = RangeMeasurement {
        timestamp: 0.0,
        tag_id: 0,
        anchor_id,
        range: 1.0,
    };
    let h = range_jacobian(s, e, &m, 0.1).unwrap().h;
    let n = s.dim();
    let eps = 1e-6;
    let mut fd = DMatrix::zeros(1, n);
    for i in 0..n {
        let mut vals = [0.0; 2];
        for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut d = DVector::zeros(n);
            d[i] = sign * eps;
            let mut t = s.clone();
            t.apply_correction(&d);
            vals[k] = range_predict(&t, e, anchor_id).unwrap();
        }
        fd[(0, i)] = (vals[0] - vals[1]) / (2.0 * eps);
    }
    relative(&fd, &h)
}

/// Places a landmark in front of every clone and returns its track.
pub fn visible_feature(
    rng: &mut ChaCha8Rng,
    s: &mut FilterState,
    ext: &CameraExtrinsics,
) -> (Vector3<f64>, FeatureTrack) {
    let pf = vec3(rng, 8.0);
    let r_ic = ext.r_ci().transpose();
    for c in s.clones.iter_mut() {
        let pc = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(2.0..8.0),
        );
        c.position = pf - c.rotation * (r_ic * (pc - ext.p_ci()));
    }
    let observations = s
        .clones
        .iter()
        .map(|c| BearingObservation {
            timestamp: c.timestamp,
            feature_id: 0,
            uv: project(&ext.to_camera(&c.rotation, &c.position, &pf)),
        })
        .collect();
    (
        pf,
        FeatureTrack {
            feature_id: 0,
            observations,
        },
    )
}

/// Relative gap of the stacked visual rows (state and feature columns).
pub fn visual_oracle(
    s: &FilterState,
    pf: &Vector3<f64>,
    track: &FeatureTrack,
    ext: &CameraExtrinsics,
) -> f64 {
    let j = visual_jacobians(track, pf, s, ext).unwrap();
    let n = s.dim();
    let predict = |st: &FilterState, f: &Vector3<f64>| -> DVector<f64> {
        let mut out = DVector::zeros(2 * track.observations.len());
        for (k, o) in track.observations.iter().enumerate() {
            let c = &st.clones[st.clone_index(o.timestamp).unwrap()];
            out.fixed_rows_mut::<2>(2 * k)
                .copy_from(&project(&ext.to_camera(&c.rotation, &c.position, f)));
        }
        out
    };
    let eps = 1e-6;
    let mut fd_x = DMatrix::zeros(j.h_x.nrows(), n);
    for i in 0..n {
        let mut d = DVector::zeros(n);
        d[i] = eps;
        let mut a = s.clone();
        a.apply_correction(&d);
        let mut b = s.clone();
        b.apply_correction(&(-d));
        fd_x.set_column(i, &((predict(&a, pf) - predict(&b, pf)) / (2.0 * eps)));
    }
    let mut fd_f = DMatrix::zeros(j.h_f.nrows(), 3);
    for i in 0..3 {
        let mut d = Vector3::zeros();
        d[i] = eps;
        fd_f.set_column(
            i,
            &((predict(s, &(pf + d)) - predict(s, &(pf - d))) / (2.0 * eps)),
        );
    }
    relative(&fd_x, &j.h_x).max(relative(&fd_f, &j.h_f))
}

/// Worst relative error of the three Jacobian oracles over `trials` random
/// states for the given parameterization.
pub fn jacobian_sweep(param: ErrorParam, trials: usize, seed: u64) -> (f64, f64, f64) {
    let mut r = rng(seed);
    let (mut wf, mut wr, mut wv) = (0.0_f64, 0.0_f64, 0.0_f64);
    let ext = CameraExtrinsics::default();
    let uwb = UwbExtrinsics::default();
    for _ in 0..trials {
        let mut s = random_state(&mut r, param, 2, 4);
        let gyro = vec3(&mut r, 1.0);
        let accel = vec3(&mut r, 5.0) + Vector3::new(0.0, 0.0, 9.8);
        let core_only = {
            let mut c = s.clone();
            while !c.clones.is_empty() {
                c.marginalize_oldest();
            }
            c
        };
        wf = wf.max(transition_oracle(&core_only, &gyro, &accel));
        wr = wr.max(range_oracle(&s, &uwb, 1));
        let (pf, track) = visible_feature(&mut r, &mut s, &ext);
        wv = wv.max(visual_oracle(&s, &pf, &track, &ext));
    }
    (wf, wr, wv)
}
