//! Observability audit of the single-feature, single-anchor error system.
//!
//! The state is SE_4(3) plus biases: (θ, v, p, p_u, p_f, b_ω, b_a), 21
//! columns. The transition comes from the same `F` the filter propagates
//! with, so the audit checks the code that actually runs.

use nalgebra::{DMatrix, DVector, Matrix3, RowVector3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::skew;
use crate::propagation::{error_jacobians, step_transition, GRAVITY};
use crate::range::{range_jacobian, RangeMeasurement, UwbExtrinsics};
use crate::sim::{stream_rng, Stream, Trajectory, TruthSample};
use crate::state::{ErrorParam, FilterState, ImuBias};
use crate::visual::{projection_jacobian, CameraExtrinsics};

pub const OBS_DIM: usize = 21;
pub const ANCHOR_ID: usize = 0;
pub const FEATURE_ID: usize = 1;
/// Singular values below this fraction of the largest count as zero.
pub const NULLITY_TOL: f64 = 1e-9;
/// Residual bound relative to ‖O‖.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// 21×4 basis: rotation about gravity, then the three translations.
#[derive(Clone, Debug, PartialEq)]
pub struct NullspaceBasis {
    pub n: DMatrix<f64>,
}

impl NullspaceBasis {
    /// Constant basis of the invariant error system.
    pub fn invariant(g: &Vector3<f64>) -> Self {
        let mut n = DMatrix::zeros(OBS_DIM, 4);
        n.fixed_view_mut::<3, 1>(0, 0).copy_from(g);
        Self::add_translations(&mut n);
        Self { n }
    }

    /// Yaw direction of the vector error system, which depends on the
    /// linearization point.
    pub fn vector(
        g: &Vector3<f64>,
        v: &Vector3<f64>,
        p: &Vector3<f64>,
        u: &Vector3<f64>,
        f: &Vector3<f64>,
    ) -> Self {
        let mut n = DMatrix::zeros(OBS_DIM, 4);
        n.fixed_view_mut::<3, 1>(0, 0).copy_from(g);
        for (k, x) in [v, p, u, f].into_iter().enumerate() {
            n.fixed_view_mut::<3, 1>(3 + 3 * k, 0).copy_from(&(-skew(x) * g));
        }
        Self::add_translations(&mut n);
        Self { n }
    }

    fn add_translations(n: &mut DMatrix<f64>) {
        for i in 0..3 {
            for blk in [6, 9, 12] {
                n[(blk + i, 1 + i)] = 1.0;
            }
        }
    }
}

/// Linearization point of one IMU step.
#[derive(Clone, Copy, Debug)]
pub struct ObsPoint {
    pub rotation: Matrix3<f64>,
    pub velocity: Vector3<f64>,
    pub position: Vector3<f64>,
    /// Bias-corrected specific force.
    pub accel: Vector3<f64>,
    pub anchor: Vector3<f64>,
    pub landmark: Vector3<f64>,
}

impl ObsPoint {
    pub fn from_truth(s: &TruthSample, anchor: &Vector3<f64>, landmark: &Vector3<f64>) -> Self {
        Self {
            rotation: s.rotation,
            velocity: s.velocity,
            position: s.position,
            accel: s.accel_body,
            anchor: *anchor,
            landmark: *landmark,
        }
    }

    fn state(&self, param: ErrorParam) -> FilterState {
        let mut s = FilterState::new(
            param,
            0.0,
            self.rotation,
            self.velocity,
            self.position,
            ImuBias::default(),
            DMatrix::identity(15, 15),
            2,
        )
        .expect("valid audit state");
        for (id, x) in [(ANCHOR_ID, self.anchor), (FEATURE_ID, self.landmark)] {
            let n = s.dim();
            s.insert_anchor(id, x, &DMatrix::identity(3, 3), &DMatrix::zeros(3, n))
                .expect("fresh anchor id");
        }
        s
    }

    /// Copy perturbed by one draw of the given per-block sigmas.
    pub fn perturbed(&self, rng: &mut impl Rng, sigma: &Perturbation, param: ErrorParam) -> Self {
        let mut s = self.state(param);
        let mut d = DVector::zeros(OBS_DIM);
        let blocks = [
            sigma.rotation,
            sigma.velocity,
            sigma.position,
            sigma.position,
            sigma.position,
        ];
        for (k, sd) in blocks.iter().enumerate() {
            for i in 0..3 {
                d[3 * k + i] = sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        s.apply_correction(&d);
        Self {
            rotation: *s.rotation(),
            velocity: *s.velocity(),
            position: *s.position(),
            accel: self.accel,
            anchor: s.core.columns[2],
            landmark: s.core.columns[3],
        }
    }
}

/// Per-block standard deviations of the estimate perturbations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Perturbation {
    pub rotation: f64,
    pub velocity: f64,
    pub position: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            rotation: 0.05,
            velocity: 0.1,
            position: 0.2,
        }
    }
}

fn visual_row(pt: &ObsPoint, param: ErrorParam, ext: &CameraExtrinsics) -> Result<DMatrix<f64>> {
    let pc = ext.to_camera(&pt.rotation, &pt.position, &pt.landmark);
    if pc.z.abs() < 1e-9 {
        return Err(Error::DegenerateGeometry("landmark in the camera plane".into()));
    }
    let hf = projection_jacobian(&pc) * ext.r_ci() * pt.rotation.transpose();
    let mut h = DMatrix::zeros(2, OBS_DIM);
    if param == ErrorParam::Vector {
        h.fixed_view_mut::<2, 3>(0, 0)
            .copy_from(&(hf * skew(&(pt.landmark - pt.position))));
    }
    h.fixed_view_mut::<2, 3>(0, 6).copy_from(&(-hf));
    h.fixed_view_mut::<2, 3>(0, 12).copy_from(&hf);
    Ok(h)
}

fn range_row(pt: &ObsPoint, param: ErrorParam) -> Result<DMatrix<f64>> {
    let s = pt.state(param);
    let m = RangeMeasurement {
        timestamp: 0.0,
        tag_id: 0,
        anchor_id: ANCHOR_ID,
        range: 0.0,
    };
    let ext = UwbExtrinsics {
        tag_offset: [0.0; 3],
        range_bias: 0.0,
    };
    Ok(range_jacobian(&s, &ext, &m, 1.0)?.h)
}

/// Unit line of sight from the anchor to the body.
pub fn range_direction(pt: &ObsPoint) -> RowVector3<f64> {
    let d = pt.position - pt.anchor;
    d.transpose() / d.norm()
}

/// Stacks `H_k Φ_{k|0}` over the linearization points. `points[i]` is the
/// estimate at IMU step `i`; a camera and a range row are added every
/// `every` steps, starting at step 0.
pub fn build_observability(
    points: &[ObsPoint],
    dt: f64,
    every: usize,
    param: ErrorParam,
    ext: &CameraExtrinsics,
) -> Result<DMatrix<f64>> {
    if every == 0 || points.len() < 2 * every + 1 {
        return Err(Error::invalid(
            "observability needs at least three measurement epochs",
        ));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    let epochs = (points.len() - 1) / every + 1;
    let mut o = DMatrix::zeros(3 * epochs, OBS_DIM);
    let mut phi = DMatrix::<f64>::identity(OBS_DIM, OBS_DIM);
    for (i, pt) in points.iter().enumerate() {
        if i % every == 0 {
            let k = i / every;
            let mut h = visual_row(pt, param, ext)?.insert_rows(2, 1, 0.0);
            h.row_mut(2).copy_from(&range_row(pt, param)?.row(0));
            o.rows_mut(3 * k, 3).copy_from(&(h * &phi));
        }
        if i + 1 < points.len() {
            let (f, _) = error_jacobians(&pt.state(param), &pt.accel);
            phi = step_transition(&f, dt) * phi;
        }
    }
    Ok(o)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NullspaceReport {
    /// max |O·N| over ‖O‖₂ with unit basis columns.
    pub max_residual: f64,
    /// ‖O·n_i‖ / ‖O‖₂ for yaw, x, y, z.
    pub per_direction: [f64; 4],
    pub nullity: usize,
    pub singular_values: Vec<f64>,
    /// Nullity above four: the trajectory does not excite the system.
    pub geometry_deficient: bool,
    pub pass: bool,
}

pub fn verify_nullspace(o: &DMatrix<f64>, basis: &NullspaceBasis) -> Result<NullspaceReport> {
    if o.ncols() != basis.n.nrows() {
        return Err(Error::invalid(format!(
            "O has {} columns, basis has {} rows",
            o.ncols(),
            basis.n.nrows()
        )));
    }
    let mut sv: Vec<f64> = o
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Err(Error::invalid("observability matrix is zero"));
    }
    let rank = sv.iter().filter(|&&s| s > NULLITY_TOL * smax).count();
    let nullity = o.ncols() - rank;
    let mut per_direction = [0.0; 4];
    let mut max_residual = 0.0_f64;
    for (j, pd) in per_direction.iter_mut().enumerate() {
        let col = basis.n.column(j) / basis.n.column(j).norm();
        let on = o * col;
        *pd = on.norm() / smax;
        max_residual = max_residual.max(on.amax() / smax);
    }
    Ok(NullspaceReport {
        max_residual,
        per_direction,
        nullity,
        singular_values: sv,
        geometry_deficient: nullity > 4,
        pass: max_residual < RESIDUAL_TOL && nullity == 4,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub trajectory: Trajectory,
    pub duration: f64,
    pub imu_rate: f64,
    pub meas_rate: f64,
    pub anchor: [f64; 3],
    pub landmark: [f64; 3],
    pub trials: usize,
    pub seed: u64,
    pub perturbation: Perturbation,
    pub camera: CameraExtrinsics,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            trajectory: Trajectory::default(),
            duration: 5.0,
            imu_rate: 100.0,
            meas_rate: 10.0,
            anchor: [7.0, 7.0, 0.5],
            landmark: [10.0, 1.0, 2.0],
            trials: 10,
            seed: 3,
            perturbation: Perturbation::default(),
            camera: CameraExtrinsics::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub cviro_truth: NullspaceReport,
    /// One report per perturbed linearization.
    pub cviro: Vec<NullspaceReport>,
    pub baseline: Vec<NullspaceReport>,
}

impl AuditReport {
    pub fn cviro_pass(&self) -> bool {
        self.cviro_truth.pass && self.cviro.iter().all(|r| r.pass)
    }

    /// Every perturbed baseline system lost the yaw direction.
    pub fn baseline_yaw_lost(&self) -> bool {
        !self.baseline.is_empty() && self.baseline.iter().all(|r| r.nullity == 3)
    }

    pub fn worst_cviro(&self) -> &NullspaceReport {
        self.cviro
            .iter()
            .chain(std::iter::once(&self.cviro_truth))
            .max_by(|a, b| a.max_residual.total_cmp(&b.max_residual))
            .expect("non-empty")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let w = self.worst_cviro();
        let line = |name: &str, r: &NullspaceReport| {
            format!(
                "{name}: nullity={} max_residual={:.3e} yaw={:.3e} x={:.3e} y={:.3e} z={:.3e}{}\n",
                r.nullity,
                r.max_residual,
                r.per_direction[0],
                r.per_direction[1],
                r.per_direction[2],
                r.per_direction[3],
                if r.geometry_deficient {
                    " geometry-deficient"
                } else {
                    ""
                }
            )
        };
        out += &line("cviro truth", &self.cviro_truth);
        for (i, r) in self.cviro.iter().enumerate() {
            out += &line(&format!("cviro trial {i}"), r);
        }
        for (i, r) in self.baseline.iter().enumerate() {
            out += &line(&format!("baseline trial {i}"), r);
        }
        out += &format!(
            "cviro: nullity={} max_residual={:.3e} {}\n",
            w.nullity,
            w.max_residual,
            if self.cviro_pass() { "PASS" } else { "FAIL" }
        );
        let bn = self.baseline.iter().map(|r| r.nullity).min().unwrap_or(0);
        out += &format!("baseline: nullity={} yaw_lost={}\n", bn, self.baseline_yaw_lost());
        out
    }
}

/// Truth points of a trajectory at the IMU rate.
pub fn truth_points(cfg: &AuditConfig) -> Vec<ObsPoint> {
    let n = (cfg.duration * cfg.imu_rate).round() as usize;
    let anchor = Vector3::from(cfg.anchor);
    let landmark = Vector3::from(cfg.landmark);
    (0..=n)
        .map(|k| {
            ObsPoint::from_truth(
                &cfg.trajectory.sample(k as f64 / cfg.imu_rate),
                &anchor,
                &landmark,
            )
        })
        .collect()
}

/// Builds O at the truth and at `trials` independently perturbed
/// linearizations for both parameterizations.
pub fn audit(cfg: &AuditConfig) -> Result<AuditReport> {
    if !(cfg.imu_rate > 0.0 && cfg.meas_rate > 0.0) {
        return Err(Error::Config("rates must be positive".into()));
    }
    cfg.trajectory.validate()?;
    let dt = 1.0 / cfg.imu_rate;
    let every = (cfg.imu_rate / cfg.meas_rate).round().max(1.0) as usize;
    let truth = truth_points(cfg);
    let inv_basis = NullspaceBasis::invariant(&GRAVITY);
    let o = build_observability(&truth, dt, every, ErrorParam::RightInvariant, &cfg.camera)?;
    let cviro_truth = verify_nullspace(&o, &inv_basis)?;
    let mut rng = stream_rng(cfg.seed, Stream::Init);
    let mut cviro = Vec::with_capacity(cfg.trials);
    let mut baseline = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        for param in [ErrorParam::RightInvariant, ErrorParam::Vector] {
            let pts: Vec<ObsPoint> = truth
                .iter()
                .map(|p| p.perturbed(&mut rng, &cfg.perturbation, param))
                .collect();
            let o = build_observability(&pts, dt, every, param, &cfg.camera)?;
            match param {
                ErrorParam::RightInvariant => cviro.push(verify_nullspace(&o, &inv_basis)?),
                ErrorParam::Vector => {
                    let p0 = &pts[0];
                    let basis = NullspaceBasis::vector(
                        &GRAVITY,
                        &p0.velocity,
                        &p0.position,
                        &p0.anchor,
                        &p0.landmark,
                    );
                    baseline.push(verify_nullspace(&o, &basis)?);
                }
            }
        }
    }
    Ok(AuditReport {
        cviro_truth,
        cviro,
        baseline,
    })
}
