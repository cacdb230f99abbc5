//! Deterministic synthetic world: analytic trajectories, wall landmarks,
//! UWB anchors and noisy IMU / camera / range streams.
//!
//! The analytic trajectory defines the ideal body rates and specific forces.
//! Ground truth is the discrete integration of those ideal signals with the
//! estimator's own integrator, so a noise-free replay is exact.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagation::{kinematic_step, ImuSample, NoiseParams, GRAVITY};
use crate::range::{RangeMeasurement, UwbExtrinsics};
use crate::visual::{project, BearingObservation, CameraExtrinsics};

/// Independent random streams of one simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Imu = 1,
    Camera = 2,
    Uwb = 3,
    Bias = 4,
    Init = 5,
    World = 6,
}

/// Counter-based generator for one stream of a seed.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

pub fn gaussian3(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

/// Parametric ground-truth path. Angles in rad, rates in rad/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Trajectory {
    Stationary {
        position: [f64; 3],
        yaw: f64,
    },
    /// Horizontal circle with heading along the velocity.
    Circle {
        center: [f64; 3],
        radius: f64,
        angular_rate: f64,
        #[serde(default)]
        vertical_amplitude: f64,
        #[serde(default)]
        vertical_rate: f64,
        #[serde(default)]
        tilt_amplitude: f64,
        #[serde(default)]
        tilt_rate: f64,
    },
    /// Per-axis sinusoids with an independent yaw profile.
    Lissajous {
        center: [f64; 3],
        amplitude: [f64; 3],
        frequency: [f64; 3],
        #[serde(default)]
        phase: [f64; 3],
        #[serde(default)]
        yaw_rate: f64,
        #[serde(default)]
        yaw_amplitude: f64,
        #[serde(default)]
        yaw_frequency: f64,
        #[serde(default)]
        tilt_amplitude: f64,
        #[serde(default)]
        tilt_rate: f64,
    },
    /// Closed uniform cubic B-spline over the waypoints, heading along the
    /// velocity.
    Spline {
        waypoints: Vec<[f64; 3]>,
        period: f64,
        #[serde(default)]
        tilt_amplitude: f64,
        #[serde(default)]
        tilt_rate: f64,
    },
}

impl Default for Trajectory {
    /// Aggressive 3-D Lissajous path through the default room.
    fn default() -> Self {
        Trajectory::Lissajous {
            center: [0.0, 0.0, 1.5],
            amplitude: [4.0, 3.0, 1.0],
            frequency: [0.6, 0.8, 1.7],
            phase: [0.0, 0.5, 0.0],
            yaw_rate: 0.3,
            yaw_amplitude: 0.6,
            yaw_frequency: 0.8,
            tilt_amplitude: 0.15,
            tilt_rate: 1.1,
        }
    }
}

/// Position derivatives and ZYX Euler angles with their rates.
#[derive(Clone, Copy, Debug)]
struct Kinematics {
    p: Vector3<f64>,
    v: Vector3<f64>,
    a: Vector3<f64>,
    euler: Vector3<f64>,
    euler_rate: Vector3<f64>,
}

fn tilt(amplitude: f64, rate: f64, t: f64) -> ([f64; 2], [f64; 2]) {
    let roll = amplitude * (rate * t).sin();
    let roll_d = amplitude * rate * (rate * t).cos();
    let w = 0.7 * rate;
    let pitch = amplitude * (w * t + 1.0).sin();
    let pitch_d = amplitude * w * (w * t + 1.0).cos();
    ([roll, pitch], [roll_d, pitch_d])
}

fn heading(v: &Vector3<f64>, a: &Vector3<f64>) -> (f64, f64) {
    let h2 = v.x * v.x + v.y * v.y;
    if h2 < 1e-18 {
        (0.0, 0.0)
    } else {
        (v.y.atan2(v.x), (v.x * a.y - v.y * a.x) / h2)
    }
}

fn bspline(waypoints: &[[f64; 3]], period: f64, t: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let n = waypoints.len();
    let h = period / n as f64;
    let u = t.rem_euclid(period) / h;
    let i = (u.floor() as usize).min(n - 1);
    let s = u - i as f64;
    let (s2, s3) = (s * s, s * s * s);
    let b = [
        (1.0 - s).powi(3) / 6.0,
        (3.0 * s3 - 6.0 * s2 + 4.0) / 6.0,
        (-3.0 * s3 + 3.0 * s2 + 3.0 * s + 1.0) / 6.0,
        s3 / 6.0,
    ];
    let db = [
        -(1.0 - s).powi(2) / 2.0,
        (9.0 * s2 - 12.0 * s) / 6.0,
        (-9.0 * s2 + 6.0 * s + 3.0) / 6.0,
        s2 / 2.0,
    ];
    let ddb = [1.0 - s, 3.0 * s - 2.0, -3.0 * s + 1.0, s];
    let (mut p, mut v, mut a) = (Vector3::zeros(), Vector3::zeros(), Vector3::zeros());
    for k in 0..4 {
        let c = Vector3::from(waypoints[(i + k) % n]);
        p += c * b[k];
        v += c * (db[k] / h);
        a += c * (ddb[k] / (h * h));
    }
    (p, v, a)
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        match self {
            Trajectory::Spline {
                waypoints, period, ..
            } => {
                if waypoints.len() < 4 {
                    return Err(Error::Config("spline needs at least 4 waypoints".into()));
                }
                if !(*period > 0.0) {
                    return Err(Error::Config("spline period must be positive".into()));
                }
            }
            Trajectory::Circle { radius, .. } if *radius < 0.0 => {
                return Err(Error::Config("circle radius must be >= 0".into()));
            }
            _ => {}
        }
        Ok(())
    }

    fn kinematics(&self, t: f64) -> Kinematics {
        match self {
            Trajectory::Stationary { position, yaw } => Kinematics {
                p: Vector3::from(*position),
                v: Vector3::zeros(),
                a: Vector3::zeros(),
                euler: Vector3::new(0.0, 0.0, *yaw),
                euler_rate: Vector3::zeros(),
            },
            Trajectory::Circle {
                center,
                radius,
                angular_rate: w,
                vertical_amplitude: az,
                vertical_rate: wz,
                tilt_amplitude,
                tilt_rate,
            } => {
                let (c, s) = ((w * t).cos(), (w * t).sin());
                let (cz, sz) = ((wz * t).cos(), (wz * t).sin());
                let p = Vector3::from(*center) + Vector3::new(radius * c, radius * s, az * sz);
                let v = Vector3::new(-radius * w * s, radius * w * c, az * wz * cz);
                let a = Vector3::new(-radius * w * w * c, -radius * w * w * s, -az * wz * wz * sz);
                let (yaw, yaw_d) = heading(&v, &a);
                let ([r, pi], [rd, pd]) = tilt(*tilt_amplitude, *tilt_rate, t);
                Kinematics {
                    p,
                    v,
                    a,
                    euler: Vector3::new(r, pi, yaw),
                    euler_rate: Vector3::new(rd, pd, yaw_d),
                }
            }
            Trajectory::Lissajous {
                center,
                amplitude,
                frequency,
                phase,
                yaw_rate,
                yaw_amplitude,
                yaw_frequency,
                tilt_amplitude,
                tilt_rate,
            } => {
                let mut p = Vector3::from(*center);
                let mut v = Vector3::zeros();
                let mut a = Vector3::zeros();
                for i in 0..3 {
                    let (amp, w) = (amplitude[i], frequency[i]);
                    let arg = w * t + phase[i];
                    p[i] += amp * arg.sin();
                    v[i] = amp * w * arg.cos();
                    a[i] = -amp * w * w * arg.sin();
                }
                let yaw = yaw_rate * t + yaw_amplitude * (yaw_frequency * t).sin();
                let yaw_d = yaw_rate + yaw_amplitude * yaw_frequency * (yaw_frequency * t).cos();
                let ([r, pi], [rd, pd]) = tilt(*tilt_amplitude, *tilt_rate, t);
                Kinematics {
                    p,
                    v,
                    a,
                    euler: Vector3::new(r, pi, yaw),
                    euler_rate: Vector3::new(rd, pd, yaw_d),
                }
            }
            Trajectory::Spline {
                waypoints,
                period,
                tilt_amplitude,
                tilt_rate,
            } => {
                let (p, v, a) = bspline(waypoints, *period, t);
                let (yaw, yaw_d) = heading(&v, &a);
                let ([r, pi], [rd, pd]) = tilt(*tilt_amplitude, *tilt_rate, t);
                Kinematics {
                    p,
                    v,
                    a,
                    euler: Vector3::new(r, pi, yaw),
                    euler_rate: Vector3::new(rd, pd, yaw_d),
                }
            }
        }
    }

    /// Analytic pose, velocity, body rate and specific force at `t`.
    pub fn sample(&self, t: f64) -> TruthSample {
        let k = self.kinematics(t);
        let (phi, theta, psi) = (k.euler.x, k.euler.y, k.euler.z);
        let (dphi, dtheta, dpsi) = (k.euler_rate.x, k.euler_rate.y, k.euler_rate.z);
        let rot = euler_zyx(phi, theta, psi);
        let omega = Vector3::new(
            dphi - dpsi * theta.sin(),
            dtheta * phi.cos() + dpsi * phi.sin() * theta.cos(),
            -dtheta * phi.sin() + dpsi * phi.cos() * theta.cos(),
        );
        TruthSample {
            timestamp: t,
            rotation: rot,
            velocity: k.v,
            position: k.p,
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            omega_body: omega,
            accel_body: rot.transpose() * (k.a - GRAVITY),
        }
    }
}

/// `Rz(ψ) Ry(θ) Rx(φ)`.
pub fn euler_zyx(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthSample {
    pub timestamp: f64,
    pub rotation: Matrix3<f64>,
    pub velocity: Vector3<f64>,
    pub position: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub omega_body: Vector3<f64>,
    pub accel_body: Vector3<f64>,
}

/// Landmarks scattered on the four side walls of a box room.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoomConfig {
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
    pub landmark_count: usize,
}

impl Default for RoomConfig {
    fn default() -> Self {
        Self {
            center: [0.0, 0.0, 1.5],
            half_extent: [10.0, 10.0, 3.0],
            landmark_count: 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    /// Seed of the landmark layout, shared across Monte Carlo runs.
    pub world_seed: u64,
    pub duration: f64,
    pub imu_rate: f64,
    pub cam_rate: f64,
    pub uwb_rate: f64,
    pub trajectory: Trajectory,
    pub noise: NoiseParams,
    /// Standard deviation of the initial gyro / accel biases.
    pub initial_bias_sigma: [f64; 2],
    pub room: RoomConfig,
    pub anchors: Vec<[f64; 3]>,
    pub camera: CameraExtrinsics,
    pub uwb: UwbExtrinsics,
    pub fov_half_angle_deg: f64,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            world_seed: 7,
            duration: 60.0,
            imu_rate: 100.0,
            cam_rate: 10.0,
            uwb_rate: 10.0,
            trajectory: Trajectory::default(),
            noise: NoiseParams::default(),
            initial_bias_sigma: [2e-3, 2e-2],
            room: RoomConfig::default(),
            anchors: vec![
                [7.0, 7.0, 0.5],
                [-7.0, 7.0, 2.5],
                [-7.0, -7.0, 1.0],
                [7.0, -7.0, 3.0],
            ],
            camera: CameraExtrinsics::default(),
            uwb: UwbExtrinsics::default(),
            fov_half_angle_deg: 45.0,
            min_depth: 0.2,
            max_depth: 40.0,
        }
    }
}

impl SimConfig {
    /// Noise-free variant of this configuration.
    pub fn noise_free(mut self) -> Self {
        self.noise = NoiseParams::zero();
        self.initial_bias_sigma = [0.0, 0.0];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::Config("duration must be positive".into()));
        }
        for (name, rate) in [("cam_rate", self.cam_rate), ("uwb_rate", self.uwb_rate)] {
            if !(rate > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
            let ratio = self.imu_rate / rate;
            if !(ratio >= 1.0 && (ratio - ratio.round()).abs() < 1e-9) {
                return Err(Error::Config(format!(
                    "imu_rate {} is not a multiple of {name} {rate}",
                    self.imu_rate
                )));
            }
        }
        if !(self.fov_half_angle_deg > 0.0 && self.fov_half_angle_deg < 90.0) {
            return Err(Error::Config("fov_half_angle_deg must be in (0, 90)".into()));
        }
        self.noise.validate()?;
        self.trajectory.validate()
    }

    pub fn imu_period_steps(&self, rate: f64) -> usize {
        (self.imu_rate / rate).round() as usize
    }

    pub fn anchor_positions(&self) -> Vec<(usize, Vector3<f64>)> {
        self.anchors
            .iter()
            .enumerate()
            .map(|(i, a)| (i, Vector3::from(*a)))
            .collect()
    }
}

/// Analytic samples at the IMU rate over `[0, duration]`.
pub fn gen_trajectory(cfg: &SimConfig) -> Vec<TruthSample> {
    let n = (cfg.duration * cfg.imu_rate).round() as usize;
    (0..=n)
        .map(|k| cfg.trajectory.sample(k as f64 / cfg.imu_rate))
        .collect()
}

/// Adds bias random walks and white noise to the ideal signals. Returns the
/// measurements; the biases are written into `truth`.
pub fn synth_imu(
    truth: &mut [TruthSample],
    noise: &NoiseParams,
    initial_bias_sigma: [f64; 2],
    imu_rate: f64,
    seed: u64,
) -> Vec<ImuSample> {
    let mut bias_rng = stream_rng(seed, Stream::Bias);
    let mut rng = stream_rng(seed, Stream::Imu);
    let dt = 1.0 / imu_rate;
    let mut bg = gaussian3(&mut bias_rng) * initial_bias_sigma[0];
    let mut ba = gaussian3(&mut bias_rng) * initial_bias_sigma[1];
    let sg = noise.gyro_noise_density * imu_rate.sqrt();
    let sa = noise.accel_noise_density * imu_rate.sqrt();
    let wg = noise.gyro_bias_walk * dt.sqrt();
    let wa = noise.accel_bias_walk * dt.sqrt();
    truth
        .iter_mut()
        .map(|s| {
            s.gyro_bias = bg;
            s.accel_bias = ba;
            let m = ImuSample::new(
                s.timestamp,
                s.omega_body + bg + gaussian3(&mut rng) * sg,
                s.accel_body + ba + gaussian3(&mut rng) * sa,
            );
            bg += gaussian3(&mut bias_rng) * wg;
            ba += gaussian3(&mut bias_rng) * wa;
            m
        })
        .collect()
}

/// Replaces the analytic states by the discrete integration of the ideal
/// signals, starting from the analytic initial state.
pub fn integrate_truth(truth: &mut [TruthSample]) {
    for k in 1..truth.len() {
        let (a, b) = truth.split_at_mut(k);
        let s0 = &a[k - 1];
        let s1 = &mut b[0];
        let dt = s1.timestamp - s0.timestamp;
        let (r, v, p) = kinematic_step(
            &s0.rotation,
            &s0.velocity,
            &s0.position,
            &s0.omega_body,
            &s1.omega_body,
            &s0.accel_body,
            &s1.accel_body,
            dt,
        );
        s1.rotation = r;
        s1.velocity = v;
        s1.position = p;
    }
}

pub fn gen_landmarks(room: &RoomConfig, world_seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = stream_rng(world_seed, Stream::World);
    let c = Vector3::from(room.center);
    let [hx, hy, hz] = room.half_extent;
    (0..room.landmark_count)
        .map(|_| {
            let wall = rng.random_range(0..4);
            let along = rng.random_range(-1.0..1.0);
            let z = rng.random_range(-hz..hz);
            let p = match wall {
                0 => Vector3::new(hx, along * hy, z),
                1 => Vector3::new(-hx, along * hy, z),
                2 => Vector3::new(along * hx, hy, z),
                _ => Vector3::new(along * hx, -hy, z),
            };
            c + p
        })
        .collect()
}

/// Camera visibility limits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub extrinsics: CameraExtrinsics,
    pub fov_half_angle: f64,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl CameraModel {
    pub fn from_config(cfg: &SimConfig) -> Self {
        Self {
            extrinsics: cfg.camera,
            fov_half_angle: cfg.fov_half_angle_deg.to_radians(),
            min_depth: cfg.min_depth,
            max_depth: cfg.max_depth,
        }
    }

    /// Noise-free normalized coordinates, or `None` when not visible.
    pub fn observe(
        &self,
        r: &Matrix3<f64>,
        p: &Vector3<f64>,
        landmark: &Vector3<f64>,
    ) -> Option<Vector2<f64>> {
        let pc = self.extrinsics.to_camera(r, p, landmark);
        if pc.z <= self.min_depth || pc.norm() > self.max_depth {
            return None;
        }
        let uv = project(&pc);
        (uv.norm().atan() <= self.fov_half_angle).then_some(uv)
    }
}

/// Visible landmarks at every camera tick with pixel noise in normalized
/// coordinates.
pub fn synth_camera(
    truth: &[TruthSample],
    landmarks: &[Vector3<f64>],
    model: &CameraModel,
    sigma: f64,
    every: usize,
    seed: u64,
) -> Vec<BearingObservation> {
    let mut rng = stream_rng(seed, Stream::Camera);
    let mut out = Vec::new();
    for s in truth.iter().step_by(every.max(1)) {
        for (id, l) in landmarks.iter().enumerate() {
            if let Some(uv) = model.observe(&s.rotation, &s.position, l) {
                let n = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
                out.push(BearingObservation {
                    timestamp: s.timestamp,
                    feature_id: id,
                    uv: uv + n * sigma,
                });
            }
        }
    }
    out
}

/// Exact range plus bias plus Gaussian noise, per anchor per UWB tick.
pub fn synth_uwb(
    truth: &[TruthSample],
    anchors: &[(usize, Vector3<f64>)],
    ext: &UwbExtrinsics,
    sigma: f64,
    every: usize,
    seed: u64,
) -> Vec<RangeMeasurement> {
    let mut rng = stream_rng(seed, Stream::Uwb);
    let mut out = Vec::new();
    for s in truth.iter().step_by(every.max(1)) {
        let tag = s.position + s.rotation * ext.tag();
        for (id, a) in anchors {
            let n: f64 = rng.sample(StandardNormal);
            out.push(RangeMeasurement {
                timestamp: s.timestamp,
                tag_id: 0,
                anchor_id: *id,
                range: (tag - a).norm() + ext.range_bias + sigma * n,
            });
        }
    }
    out
}

/// One simulated dataset with its ground truth.
#[derive(Clone, Debug)]
pub struct SimData {
    pub imu: Vec<ImuSample>,
    pub features: Vec<BearingObservation>,
    pub ranges: Vec<RangeMeasurement>,
    /// Discrete ground truth at the IMU rate.
    pub truth: Vec<TruthSample>,
    pub anchors: Vec<(usize, Vector3<f64>)>,
    pub landmarks: Vec<Vector3<f64>>,
    pub imu_rate: f64,
}

impl SimData {
    /// Truth sample nearest to `t`.
    pub fn truth_at(&self, t: f64) -> &TruthSample {
        let k = self.truth.partition_point(|s| s.timestamp < t);
        if k == 0 {
            return &self.truth[0];
        }
        if k == self.truth.len() {
            return &self.truth[k - 1];
        }
        let (a, b) = (&self.truth[k - 1], &self.truth[k]);
        if t - a.timestamp <= b.timestamp - t {
            a
        } else {
            b
        }
    }
}

pub fn simulate(cfg: &SimConfig) -> Result<SimData> {
    cfg.validate()?;
    let mut truth = gen_trajectory(cfg);
    let imu = synth_imu(
        &mut truth,
        &cfg.noise,
        cfg.initial_bias_sigma,
        cfg.imu_rate,
        cfg.seed,
    );
    integrate_truth(&mut truth);
    let landmarks = gen_landmarks(&cfg.room, cfg.world_seed);
    let anchors = cfg.anchor_positions();
    let features = synth_camera(
        &truth,
        &landmarks,
        &CameraModel::from_config(cfg),
        cfg.noise.cam_sigma(),
        cfg.imu_period_steps(cfg.cam_rate),
        cfg.seed,
    );
    let ranges = synth_uwb(
        &truth,
        &anchors,
        &cfg.uwb,
        cfg.noise.uwb_range_sigma,
        cfg.imu_period_steps(cfg.uwb_rate),
        cfg.seed,
    );
    Ok(SimData {
        imu,
        features,
        ranges,
        truth,
        anchors,
        landmarks,
        imu_rate: cfg.imu_rate,
    })
}
