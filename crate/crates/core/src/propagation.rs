//! IMU mean and covariance propagation.
//!
//! The mean uses a trapezoidal step between consecutive samples with the
//! exact SO(3) exponential. The error transition of each step is the exact
//! exponential of `F·dt` (F is nilpotent of order four), accumulated over the
//! batch and applied once to the IMU block and its cross-covariance with the
//! clones.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::{exp_so3, skew};
use crate::state::{symmetrize, ErrorParam, FilterState, TIME_EPS};

pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.8);

/// Noise channels of the continuous model: gyro, accel, gyro walk, accel walk.
pub const NOISE_DIM: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn new(timestamp: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self {
            timestamp,
            gyro,
            accel,
        }
    }

    fn lerp(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
        let span = b.timestamp - a.timestamp;
        let w = if span > 0.0 {
            ((t - a.timestamp) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        ImuSample {
            timestamp: t,
            gyro: a.gyro.lerp(&b.gyro, w),
            accel: a.accel.lerp(&b.accel, w),
        }
    }
}

/// Sensor noise. IMU entries are continuous-time densities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    /// rad/(s·√Hz)
    pub gyro_noise_density: f64,
    /// m/(s²·√Hz)
    pub accel_noise_density: f64,
    /// rad/(s²·√Hz)
    pub gyro_bias_walk: f64,
    /// m/(s³·√Hz)
    pub accel_bias_walk: f64,
    pub cam_pixel_sigma: f64,
    /// Pixels per unit of normalized image coordinate.
    pub focal_length: f64,
    pub uwb_range_sigma: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            gyro_noise_density: 2.0e-3,
            accel_noise_density: 3.0e-3,
            gyro_bias_walk: 3.0e-4,
            accel_bias_walk: 3.0e-4,
            cam_pixel_sigma: 1.0,
            focal_length: 460.0,
            uwb_range_sigma: 0.10,
        }
    }
}

impl NoiseParams {
    pub fn zero() -> Self {
        Self {
            gyro_noise_density: 0.0,
            accel_noise_density: 0.0,
            gyro_bias_walk: 0.0,
            accel_bias_walk: 0.0,
            cam_pixel_sigma: 0.0,
            focal_length: 460.0,
            uwb_range_sigma: 0.0,
        }
    }

    /// Standard deviation in normalized image coordinates.
    pub fn cam_sigma(&self) -> f64 {
        self.cam_pixel_sigma / self.focal_length
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_bias_walk,
            self.accel_bias_walk,
            self.cam_pixel_sigma,
            self.uwb_range_sigma,
        ];
        if all.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::invalid("noise parameters must be finite and >= 0"));
        }
        if !(self.focal_length > 0.0) {
            return Err(Error::invalid("focal_length must be positive"));
        }
        Ok(())
    }

    /// Diagonal continuous noise covariance over [n_ω, n_a, w_ω, w_a].
    pub fn continuous_covariance(&self) -> DMatrix<f64> {
        let d = [
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_bias_walk,
            self.accel_bias_walk,
        ];
        DMatrix::from_fn(NOISE_DIM, NOISE_DIM, |i, j| {
            if i == j {
                d[i / 3] * d[i / 3]
            } else {
                0.0
            }
        })
    }
}

/// One trapezoidal step of the noise-free kinematics. `w*` and `a*` are the
/// bias-corrected body rates and specific forces at both ends of the step.
#[allow(clippy::too_many_arguments)]
pub fn kinematic_step(
    r: &Matrix3<f64>,
    v: &Vector3<f64>,
    p: &Vector3<f64>,
    w0: &Vector3<f64>,
    w1: &Vector3<f64>,
    a0: &Vector3<f64>,
    a1: &Vector3<f64>,
    dt: f64,
) -> (Matrix3<f64>, Vector3<f64>, Vector3<f64>) {
    let w = (w0 + w1) * 0.5;
    let r1 = r * exp_so3(&(w * dt));
    let acc = (r * a0 + r1 * a1) * 0.5 + GRAVITY;
    let v1 = v + acc * dt;
    let p1 = p + v * dt + acc * (0.5 * dt * dt);
    (r1, v1, p1)
}

/// Continuous error dynamics `F` (imu_dim × imu_dim) and noise input `G`
/// (imu_dim × 12) at the current estimate. `accel` is the bias-corrected
/// specific force, used only by the vector parameterization.
pub fn error_jacobians(s: &FilterState, accel: &Vector3<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = s.imu_dim();
    let bo = s.bias_offset();
    let r = s.core.rotation;
    let mut f = DMatrix::zeros(n, n);
    let mut g = DMatrix::zeros(n, NOISE_DIM);
    for i in 0..3 {
        f[(6 + i, 3 + i)] = 1.0;
        g[(bo + i, 6 + i)] = 1.0;
        g[(bo + 3 + i, 9 + i)] = 1.0;
    }
    match s.param {
        ErrorParam::RightInvariant => {
            f.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&GRAVITY));
            // −Ad_X̂ restricted to the bias inputs.
            f.fixed_view_mut::<3, 3>(0, bo).copy_from(&(-r));
            f.fixed_view_mut::<3, 3>(3, bo + 3).copy_from(&(-r));
            for (k, col) in s.core.columns.iter().enumerate() {
                let blk = -skew(col) * r;
                f.fixed_view_mut::<3, 3>(3 + 3 * k, bo).copy_from(&blk);
                g.fixed_view_mut::<3, 3>(3 + 3 * k, 0).copy_from(&(-blk));
            }
            g.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            g.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        }
        ErrorParam::Vector => {
            f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-skew(&(r * accel))));
            f.fixed_view_mut::<3, 3>(0, bo).copy_from(&(-r));
            f.fixed_view_mut::<3, 3>(3, bo + 3).copy_from(&(-r));
            g.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            g.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        }
    }
    (f, g)
}

/// `exp(F·dt)` for the nilpotent error dynamics.
pub fn step_transition(f: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let n = f.nrows();
    let fd = f * dt;
    let fd2 = &fd * &fd;
    let fd3 = &fd2 * &fd;
    DMatrix::identity(n, n) + &fd + fd2 * 0.5 + fd3 * (1.0 / 6.0)
}

/// Readings covering `[t0, t1]`, with the end points interpolated. Samples
/// must be strictly increasing; outside their span the nearest one is held.
pub fn select_readings(samples: &[ImuSample], t0: f64, t1: f64) -> Result<Vec<ImuSample>> {
    if samples.is_empty() {
        return Err(Error::invalid("no IMU samples to propagate with"));
    }
    if let Some(w) = samples.windows(2).find(|w| !(w[1].timestamp > w[0].timestamp)) {
        return Err(Error::invalid(format!(
            "IMU timestamps not increasing at t={}",
            w[1].timestamp
        )));
    }
    let at = |t: f64| -> ImuSample {
        let i = samples.partition_point(|s| s.timestamp <= t);
        if i == 0 {
            ImuSample {
                timestamp: t,
                ..samples[0]
            }
        } else if i == samples.len() {
            ImuSample {
                timestamp: t,
                ..samples[i - 1]
            }
        } else {
            ImuSample::lerp(&samples[i - 1], &samples[i], t)
        }
    };
    let mut out = vec![at(t0)];
    let lo = samples.partition_point(|s| s.timestamp <= t0 + TIME_EPS);
    let hi = samples.partition_point(|s| s.timestamp < t1 - TIME_EPS);
    if lo < hi {
        out.extend_from_slice(&samples[lo..hi]);
    }
    out.push(at(t1));
    Ok(out)
}

/// Propagates mean and covariance from `s.timestamp` to `t_end`.
pub fn propagate(s: &mut FilterState, samples: &[ImuSample], t_end: f64, noise: &NoiseParams) -> Result<()> {
    if t_end < s.timestamp - TIME_EPS {
        return Err(Error::invalid(format!(
            "cannot propagate backwards from {} to {t_end}",
            s.timestamp
        )));
    }
    if t_end - s.timestamp <= TIME_EPS {
        return Ok(());
    }
    let readings = select_readings(samples, s.timestamp, t_end)?;
    let (phi, q) = propagate_readings(s, &readings, noise);
    apply_transition(s, &phi, &q);
    s.timestamp = t_end;
    s.tick_renormalize();
    Ok(())
}

/// Integrates the mean over the readings and returns the accumulated
/// transition and noise for the IMU block. Covariance is left untouched.
pub fn propagate_readings(
    s: &mut FilterState,
    readings: &[ImuSample],
    noise: &NoiseParams,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = s.imu_dim();
    let qc = noise.continuous_covariance();
    let mut phi = DMatrix::identity(n, n);
    let mut q = DMatrix::zeros(n, n);
    for w in readings.windows(2) {
        let dt = w[1].timestamp - w[0].timestamp;
        if dt <= 0.0 {
            continue;
        }
        let w0 = w[0].gyro - s.bias.gyro;
        let w1 = w[1].gyro - s.bias.gyro;
        let a0 = w[0].accel - s.bias.accel;
        let a1 = w[1].accel - s.bias.accel;
        let (f, g) = error_jacobians(s, &a0);
        let step = step_transition(&f, dt);
        let sg = &step * g;
        let qk = &sg * &qc * sg.transpose() * dt;
        q = &step * q * step.transpose() + qk;
        phi = &step * phi;

        let (r1, v1, p1) = kinematic_step(
            &s.core.rotation,
            s.velocity(),
            s.position(),
            &w0,
            &w1,
            &a0,
            &a1,
            dt,
        );
        s.core.rotation = r1;
        s.core.columns[0] = v1;
        s.core.columns[1] = p1;
    }
    (phi, symmetrize(q))
}

/// `P_imu ← Φ P_imu Φᵀ + Q`, `P_imu,clones ← Φ P_imu,clones`.
pub fn apply_transition(s: &mut FilterState, phi: &DMatrix<f64>, q: &DMatrix<f64>) {
    let n = s.imu_dim();
    let total = s.dim();
    let p = &mut s.covariance;
    let pii = p.view((0, 0), (n, n)).clone_owned();
    let new_ii = symmetrize(phi * pii * phi.transpose() + q);
    p.view_mut((0, 0), (n, n)).copy_from(&new_ii);
    if total > n {
        let m = total - n;
        let cross = phi * p.view((0, n), (n, m));
        p.view_mut((0, n), (n, m)).copy_from(&cross);
        p.view_mut((n, 0), (m, n)).copy_from(&cross.transpose());
    }
}
