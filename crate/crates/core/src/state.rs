//! Filter state, stochastic cloning and the generic EKF update.
//!
//! Covariance layout (all blocks 3-wide unless noted):
//!
//! ```text
//! [ θ | v | p | anchor_1 .. anchor_L | b_ω | b_a | clone_newest(6) .. clone_oldest(6) ]
//! ```
//!
//! The Kalman error is the correction that maps the estimate onto the truth,
//! `X = exp(ξ) X̂` for the group part and `b = b̂ + b̃` for the biases, so the
//! update retracts as `X̂⁺ = exp(δ) X̂`. With the right-invariant error
//! `η = X̂ X⁻¹ = exp(−ξ)` this contracts η, and the covariance of `ξ` and
//! `−ξ` coincide.
//!
//! Anchors are stored as extra columns of the SE_{2+L}(3) core in ascending
//! anchor-id order. Clones referenced by a pending anchor initialization are
//! pinned and survive outside the visual window until released.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::liegroup::{exp_so3, left_jacobian, orthonormalize, so3_log, ExtendedPose};

/// Default χ² gate confidence.
pub const GATE_CONFIDENCE: f64 = 0.95;

/// Size of the pose-only (non-anchor) part of the core tangent space.
pub const POSE_DIM: usize = 9;

/// Timestamps closer than this are considered equal.
pub const TIME_EPS: f64 = 1e-6;

const RENORM_EVERY: u32 = 100;

/// How the filter parameterizes its error state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorParam {
    /// Right-invariant error on SE_{2+L}(3) / SE(3) (CVIRO).
    RightInvariant,
    /// Classic vector error: global-frame rotation error, additive translations.
    Vector,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ImuBias {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CloneState {
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
    pub timestamp: f64,
    pins: u32,
}

impl CloneState {
    pub fn new(rotation: Matrix3<f64>, position: Vector3<f64>, timestamp: f64) -> Self {
        Self {
            rotation,
            position,
            timestamp,
            pins: 0,
        }
    }

    pub fn is_pinned(&self) -> bool {
        self.pins > 0
    }
}

/// Linearized measurement `r = H x̃ + n`, `n ~ N(0, noise)`.
#[derive(Clone, Debug)]
pub struct UpdatePacket {
    pub h: DMatrix<f64>,
    pub r: DVector<f64>,
    pub noise: DMatrix<f64>,
}

impl UpdatePacket {
    pub fn new(h: DMatrix<f64>, r: DVector<f64>, noise: DMatrix<f64>) -> Result<Self> {
        let rows = h.nrows();
        if r.len() != rows || noise.nrows() != rows || noise.ncols() != rows {
            return Err(Error::invalid(format!(
                "update packet: H has {rows} rows, r {}, noise {}x{}",
                r.len(),
                noise.nrows(),
                noise.ncols()
            )));
        }
        Ok(Self { h, r, noise })
    }

    /// Packet with isotropic noise `sigma²·I`.
    pub fn isotropic(h: DMatrix<f64>, r: DVector<f64>, sigma: f64) -> Result<Self> {
        let rows = h.nrows();
        Self::new(h, r, DMatrix::identity(rows, rows) * (sigma * sigma))
    }

    pub fn rows(&self) -> usize {
        self.h.nrows()
    }

    /// Stacks packets with block-diagonal noise.
    pub fn stack(packets: &[UpdatePacket]) -> Option<UpdatePacket> {
        let cols = packets.first()?.h.ncols();
        let rows: usize = packets.iter().map(|p| p.rows()).sum();
        let mut h = DMatrix::zeros(rows, cols);
        let mut r = DVector::zeros(rows);
        let mut noise = DMatrix::zeros(rows, rows);
        let mut at = 0;
        for p in packets {
            let n = p.rows();
            h.view_mut((at, 0), (n, cols)).copy_from(&p.h);
            r.rows_mut(at, n).copy_from(&p.r);
            noise.view_mut((at, at), (n, n)).copy_from(&p.noise);
            at += n;
        }
        Some(UpdatePacket { h, r, noise })
    }
}

/// Joint estimate of the IMU core, anchors, biases and pose clones.
#[derive(Clone, Debug)]
pub struct FilterState {
    pub param: ErrorParam,
    pub timestamp: f64,
    /// Columns: velocity, position, then one per initialized anchor.
    pub core: ExtendedPose,
    /// Anchor id of each anchor column, ascending.
    pub anchor_ids: Vec<usize>,
    pub bias: ImuBias,
    /// Newest first.
    pub clones: Vec<CloneState>,
    pub max_clones: usize,
    pub covariance: DMatrix<f64>,
    renorm_counter: u32,
}

impl FilterState {
    /// Creates a state without anchors or clones. `covariance` must be 15×15.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        param: ErrorParam,
        timestamp: f64,
        rotation: Matrix3<f64>,
        velocity: Vector3<f64>,
        position: Vector3<f64>,
        bias: ImuBias,
        covariance: DMatrix<f64>,
        max_clones: usize,
    ) -> Result<Self> {
        if covariance.nrows() != POSE_DIM + 6 || covariance.ncols() != POSE_DIM + 6 {
            return Err(Error::invalid("initial covariance must be 15x15"));
        }
        if max_clones < 2 {
            return Err(Error::invalid("max_clones must be at least 2"));
        }
        Ok(Self {
            param,
            timestamp,
            core: ExtendedPose::new(rotation, vec![velocity, position]),
            anchor_ids: Vec::new(),
            bias,
            clones: Vec::new(),
            max_clones,
            covariance,
            renorm_counter: 0,
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.core.rotation
    }

    pub fn velocity(&self) -> &Vector3<f64> {
        &self.core.columns[0]
    }

    pub fn position(&self) -> &Vector3<f64> {
        &self.core.columns[1]
    }

    pub fn num_anchors(&self) -> usize {
        self.anchor_ids.len()
    }

    /// Dimension of the core tangent space (θ, v, p, anchors).
    pub fn core_dim(&self) -> usize {
        POSE_DIM + 3 * self.num_anchors()
    }

    pub fn bias_offset(&self) -> usize {
        self.core_dim()
    }

    /// Core plus biases.
    pub fn imu_dim(&self) -> usize {
        self.core_dim() + 6
    }

    pub fn clone_offset(&self, index: usize) -> usize {
        self.imu_dim() + 6 * index
    }

    pub fn dim(&self) -> usize {
        self.imu_dim() + 6 * self.clones.len()
    }

    pub fn anchor_slot(&self, anchor_id: usize) -> Option<usize> {
        self.anchor_ids.binary_search(&anchor_id).ok()
    }

    pub fn anchor_offset(&self, slot: usize) -> usize {
        POSE_DIM + 3 * slot
    }

    pub fn is_anchor_initialized(&self, anchor_id: usize) -> bool {
        self.anchor_slot(anchor_id).is_some()
    }

    pub fn anchor_position(&self, anchor_id: usize) -> Option<&Vector3<f64>> {
        self.anchor_slot(anchor_id).map(|s| &self.core.columns[2 + s])
    }

    pub fn clone_index(&self, timestamp: f64) -> Option<usize> {
        self.clones
            .iter()
            .position(|c| (c.timestamp - timestamp).abs() < TIME_EPS)
    }

    /// Copies the current pose into the clone window. When the window holds
    /// more than `max_clones` clones, unpinned ones beyond it are
    /// marginalized.
    pub fn augment_clone(&mut self, timestamp: f64) {
        let n = self.dim();
        let at = self.imu_dim();
        let mut j = DMatrix::zeros(6, n);
        for i in 0..3 {
            j[(i, i)] = 1.0;
            j[(3 + i, 6 + i)] = 1.0;
        }
        let jp = &j * &self.covariance;
        let jpj = &jp * j.transpose();
        self.covariance = insert_block(&self.covariance, at, &jp, &jpj);
        self.clones.insert(
            0,
            CloneState::new(self.core.rotation, *self.position(), timestamp),
        );
        self.prune_clones();
    }

    /// Removes unpinned clones that have fallen out of the visual window.
    pub fn prune_clones(&mut self) {
        let mut i = self.clones.len();
        while i > self.max_clones {
            i -= 1;
            if !self.clones[i].is_pinned() {
                self.remove_clone(i);
            }
        }
    }

    /// Drops the oldest clone and its covariance rows and columns.
    pub fn marginalize_oldest(&mut self) {
        if self.clones.is_empty() {
            log::warn!("marginalize_oldest: clone window is empty");
            return;
        }
        self.remove_clone(self.clones.len() - 1);
    }

    pub fn remove_clone(&mut self, index: usize) {
        let off = self.clone_offset(index);
        self.covariance = remove_block(&self.covariance, off, 6);
        self.clones.remove(index);
    }

    /// Keeps the clone at `timestamp` alive outside the visual window.
    pub fn pin_clone(&mut self, timestamp: f64) -> bool {
        match self.clone_index(timestamp) {
            Some(i) => {
                self.clones[i].pins += 1;
                true
            }
            None => false,
        }
    }

    pub fn unpin_clone(&mut self, timestamp: f64) {
        if let Some(i) = self.clone_index(timestamp) {
            self.clones[i].pins = self.clones[i].pins.saturating_sub(1);
        }
    }

    /// Inserts a new anchor column with its covariance and cross-covariance
    /// (`cross` is 3×dim against the current layout).
    pub fn insert_anchor(
        &mut self,
        anchor_id: usize,
        position: Vector3<f64>,
        cov: &DMatrix<f64>,
        cross: &DMatrix<f64>,
    ) -> Result<()> {
        if self.is_anchor_initialized(anchor_id) {
            return Err(Error::invalid(format!("anchor {anchor_id} already initialized")));
        }
        if cov.shape() != (3, 3) || cross.shape() != (3, self.dim()) {
            return Err(Error::invalid("insert_anchor: bad covariance shapes"));
        }
        let slot = self.anchor_ids.partition_point(|&id| id < anchor_id);
        let at = self.anchor_offset(slot);
        self.covariance = insert_block(&self.covariance, at, cross, cov);
        self.anchor_ids.insert(slot, anchor_id);
        self.core.columns.insert(2 + slot, position);
        Ok(())
    }

    /// EKF update with the Joseph-form covariance.
    pub fn kalman_update(&mut self, u: &UpdatePacket) -> Result<()> {
        let n = self.dim();
        if u.h.ncols() != n {
            return Err(Error::invalid(format!(
                "update: H has {} columns, state has {n}",
                u.h.ncols()
            )));
        }
        if u.rows() == 0 {
            return Ok(());
        }
        let (delta, p) = kalman_step(&self.covariance, u)?;
        self.covariance = p;
        self.apply_correction(&delta);
        Ok(())
    }

    /// Retracts a correction vector onto the state.
    pub fn apply_correction(&mut self, delta: &DVector<f64>) {
        let cd = self.core_dim();
        match self.param {
            ErrorParam::RightInvariant => {
                let step = ExtendedPose::exp_unchecked(&delta.as_slice()[..cd]);
                self.core = step
                    .compose(&self.core)
                    .expect("correction matches the core dimension");
            }
            ErrorParam::Vector => {
                let dth = Vector3::new(delta[0], delta[1], delta[2]);
                self.core.rotation = exp_so3(&dth) * self.core.rotation;
                for (i, c) in self.core.columns.iter_mut().enumerate() {
                    *c += delta.fixed_rows::<3>(3 + 3 * i);
                }
            }
        }
        let bo = self.bias_offset();
        self.bias.gyro += delta.fixed_rows::<3>(bo);
        self.bias.accel += delta.fixed_rows::<3>(bo + 3);
        let param = self.param;
        let base = self.imu_dim();
        for (i, c) in self.clones.iter_mut().enumerate() {
            let d = delta.fixed_rows::<6>(base + 6 * i);
            let dth: Vector3<f64> = d.fixed_rows::<3>(0).into();
            let dp: Vector3<f64> = d.fixed_rows::<3>(3).into();
            let rot = exp_so3(&dth);
            match param {
                ErrorParam::RightInvariant => {
                    c.position = rot * c.position + left_jacobian(&dth) * dp;
                }
                ErrorParam::Vector => c.position += dp,
            }
            c.rotation = rot * c.rotation;
        }
    }

    /// Re-projects rotations onto SO(3) every hundred calls.
    pub fn tick_renormalize(&mut self) {
        self.renorm_counter += 1;
        if self.renorm_counter >= RENORM_EVERY {
            self.renorm_counter = 0;
            self.core.rotation = orthonormalize(&self.core.rotation);
            for c in &mut self.clones {
                c.rotation = orthonormalize(&c.rotation);
            }
        }
    }
}

/// Correction and posterior covariance of one linear update.
pub fn kalman_step(p: &DMatrix<f64>, u: &UpdatePacket) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let pht = p * u.h.transpose();
    let s = symmetrize(&u.h * &pht + &u.noise);
    let chol = s.clone().cholesky().ok_or(Error::SingularUpdate)?;
    let kt = chol.solve(&pht.transpose());
    let k = kt.transpose();
    let delta = &k * &u.r;
    if !delta.iter().all(|x| x.is_finite()) {
        return Err(Error::NumericalFailure("non-finite correction".into()));
    }
    // (I−KH)P(I−KH)ᵀ + KRKᵀ = P − KUᵀ − UKᵀ + KSKᵀ with U = PHᵀ.
    let kut = &k * pht.transpose();
    let post = symmetrize(p - &kut - kut.transpose() + &k * (&s * &kt));
    check_covariance(&post)?;
    Ok((delta, post))
}

/// Error of `estimate` with respect to `truth` in the estimate's own
/// parameterization (the correction that maps the estimate onto the truth).
/// Both states must have the same anchor set and clone layout.
pub fn error_vector(estimate: &FilterState, truth: &FilterState) -> Result<DVector<f64>> {
    if estimate.anchor_ids != truth.anchor_ids || estimate.clones.len() != truth.clones.len() {
        return Err(Error::invalid("error_vector: state layouts differ"));
    }
    let mut e = DVector::zeros(estimate.dim());
    let cd = estimate.core_dim();
    match estimate.param {
        ErrorParam::RightInvariant => {
            let eta = truth.core.compose(&estimate.core.inverse())?;
            e.rows_mut(0, cd).copy_from(&eta.log()?);
        }
        ErrorParam::Vector => {
            let dth = so3_log(&(truth.core.rotation * estimate.core.rotation.transpose()))?;
            e.fixed_rows_mut::<3>(0).copy_from(&dth);
            for (i, (t, s)) in truth.core.columns.iter().zip(&estimate.core.columns).enumerate() {
                e.fixed_rows_mut::<3>(3 + 3 * i).copy_from(&(t - s));
            }
        }
    }
    let bo = estimate.bias_offset();
    e.fixed_rows_mut::<3>(bo)
        .copy_from(&(truth.bias.gyro - estimate.bias.gyro));
    e.fixed_rows_mut::<3>(bo + 3)
        .copy_from(&(truth.bias.accel - estimate.bias.accel));
    for (i, (t, s)) in truth.clones.iter().zip(&estimate.clones).enumerate() {
        let off = estimate.clone_offset(i);
        match estimate.param {
            ErrorParam::RightInvariant => {
                let a = ExtendedPose::new(t.rotation, vec![t.position]);
                let b = ExtendedPose::new(s.rotation, vec![s.position]);
                e.fixed_rows_mut::<6>(off)
                    .copy_from(&a.compose(&b.inverse())?.log()?);
            }
            ErrorParam::Vector => {
                let dth = so3_log(&(t.rotation * s.rotation.transpose()))?;
                e.fixed_rows_mut::<3>(off).copy_from(&dth);
                e.fixed_rows_mut::<3>(off + 3)
                    .copy_from(&(t.position - s.position));
            }
        }
    }
    Ok(e)
}

/// χ² test of the innovation at the default 95% confidence.
pub fn chi2_gate(u: &UpdatePacket, covariance: &DMatrix<f64>) -> bool {
    chi2_gate_with(u, covariance, GATE_CONFIDENCE)
}

pub fn chi2_gate_with(u: &UpdatePacket, covariance: &DMatrix<f64>, confidence: f64) -> bool {
    match mahalanobis_sq(u, covariance) {
        Some(d2) => d2 < chi2_quantile(u.rows(), confidence),
        None => false,
    }
}

/// `rᵀ (H P Hᵀ + R)⁻¹ r`, or `None` when the innovation covariance is singular.
pub fn mahalanobis_sq(u: &UpdatePacket, covariance: &DMatrix<f64>) -> Option<f64> {
    let s = symmetrize(&u.h * covariance * u.h.transpose() + &u.noise);
    let chol = s.cholesky()?;
    Some(u.r.dot(&chol.solve(&u.r)))
}

/// Inverse CDF of the χ² distribution with `dof` degrees of freedom.
pub fn chi2_quantile(dof: usize, confidence: f64) -> f64 {
    ChiSquared::new(dof.max(1) as f64)
        .expect("dof > 0")
        .inverse_cdf(confidence)
}

pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Rejects covariances with a clearly negative eigenvalue. The diagonal is
/// always checked; debug builds also test `P + 1e-6·I` for definiteness.
pub fn check_covariance(p: &DMatrix<f64>) -> Result<()> {
    if let Some(d) = p.diagonal().iter().find(|d| !(**d >= -1e-6)) {
        return Err(Error::NumericalFailure(format!("covariance diagonal entry {d}")));
    }
    if cfg!(debug_assertions) {
        let n = p.nrows();
        if (p + DMatrix::<f64>::identity(n, n) * 1e-6).cholesky().is_none() {
            return Err(Error::NumericalFailure(
                "covariance has an eigenvalue below -1e-6".into(),
            ));
        }
    }
    Ok(())
}

/// Inserts `k` new rows/columns at `at`. `cross` is `k×n` (new rows against
/// the old layout) and `block` is `k×k`.
pub(crate) fn insert_block(
    p: &DMatrix<f64>,
    at: usize,
    cross: &DMatrix<f64>,
    block: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = p.nrows();
    let k = block.nrows();
    let mut out = DMatrix::zeros(n + k, n + k);
    let old = |i: usize| if i < at { i } else { i - k };
    for j in 0..n + k {
        let jn = (at..at + k).contains(&j);
        for i in 0..n + k {
            let inew = (at..at + k).contains(&i);
            out[(i, j)] = match (inew, jn) {
                (false, false) => p[(old(i), old(j))],
                (true, false) => cross[(i - at, old(j))],
                (false, true) => cross[(j - at, old(i))],
                (true, true) => block[(i - at, j - at)],
            };
        }
    }
    out
}

pub(crate) fn remove_block(p: &DMatrix<f64>, at: usize, k: usize) -> DMatrix<f64> {
    p.clone().remove_rows(at, k).remove_columns(at, k)
}
