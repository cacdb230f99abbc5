//! Delayed anchor initialization.
//!
//! Ranges to an uninitialized anchor are buffered together with the pose
//! clone taken at the same instant; the clone stays pinned in the state so
//! its covariance and cross-covariance remain available. Once the window is
//! full and the tag positions span a volume, the anchor is solved by
//! Gauss-Newton and inserted with the covariance obtained by splitting the
//! stacked linear system with an orthogonal decomposition of the anchor
//! Jacobian:
//!
//! ```text
//! Qᵀ r = [H_x1  H_f1] [x̃ ]  + n      (3 rows, H_f1 invertible)
//!        [H_x2  0   ] [ξ_u]          (remaining rows)
//! ```
//!
//! The top block defines the anchor error and its correlation with the
//! state, the bottom block is an ordinary update.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::skew;
use crate::range::{RangeMeasurement, UwbExtrinsics};
use crate::state::{chi2_gate_with, ErrorParam, FilterState, UpdatePacket};

const MAX_ITERATIONS: usize = 50;
const STEP_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorInitConfig {
    /// Buffered ranges per anchor before solving.
    pub window: usize,
    /// Minimum RMS spread of the tag positions along their thinnest axis [m].
    pub min_spread: f64,
}

impl Default for AnchorInitConfig {
    fn default() -> Self {
        Self {
            window: 50,
            min_spread: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NlsSolution {
    pub position: Vector3<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub rms: f64,
}

/// RMS spread of the points along their thinnest principal axis.
pub fn geometry_spread(points: &[Vector3<f64>]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    (cov / n).symmetric_eigenvalues().min().max(0.0).sqrt()
}

fn cost(tags: &[Vector3<f64>], ranges: &[f64], u: &Vector3<f64>) -> f64 {
    tags.iter()
        .zip(ranges)
        .map(|(t, z)| (z - (t - u).norm()).powi(2))
        .sum()
}

fn gauss_newton(tags: &[Vector3<f64>], ranges: &[f64], seed: Vector3<f64>) -> NlsSolution {
    let mut u = seed;
    let mut c = cost(tags, ranges, &u);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (t, z) in tags.iter().zip(ranges) {
            let d = u - t;
            let dist = d.norm();
            if dist < 1e-9 {
                continue;
            }
            let j = d / dist;
            jtj += j * j.transpose();
            jtr += j * (z - dist);
        }
        let Some(step) = jtj.cholesky().map(|ch| ch.solve(&jtr)) else {
            break;
        };
        let mut scale = 1.0;
        let mut next = u + step;
        let mut nc = cost(tags, ranges, &next);
        // near the minimum cost differences drown in round-off; trust GN
        let tiny = step.norm() < 1e-6;
        while nc > c && !tiny && scale > 1e-6 {
            scale *= 0.5;
            next = u + step * scale;
            nc = cost(tags, ranges, &next);
        }
        if nc > c && !tiny {
            break;
        }
        u = next;
        c = nc;
        let moved = step.norm() * scale;
        converged |= moved < STEP_TOL;
        // keep polishing a converged solution down to round-off
        if moved < 1e-13 * (1.0 + u.norm()) {
            break;
        }
    }
    NlsSolution {
        position: u,
        converged,
        iterations,
        rms: (c / tags.len() as f64).sqrt(),
    }
}

/// Linear multilateration from differences of squared ranges.
fn multilateration(tags: &[Vector3<f64>], ranges: &[f64]) -> Option<Vector3<f64>> {
    let n = tags.len() as f64;
    let mean_t = tags.iter().sum::<Vector3<f64>>() / n;
    let k: Vec<f64> = tags
        .iter()
        .zip(ranges)
        .map(|(t, z)| z * z - t.norm_squared())
        .collect();
    let mean_k = k.iter().sum::<f64>() / n;
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for (t, ki) in tags.iter().zip(&k) {
        let a = (t - mean_t) * -2.0;
        ata += a * a.transpose();
        atb += a * (ki - mean_k);
    }
    ata.try_inverse().map(|inv| inv * atb)
}

/// Anchor position from tag positions and bias-free ranges.
pub fn solve_anchor_nls(tags: &[Vector3<f64>], ranges: &[f64], min_spread: f64) -> Result<NlsSolution> {
    if tags.len() != ranges.len() {
        return Err(Error::invalid("tags and ranges differ in length"));
    }
    if tags.len() < 4 {
        return Err(Error::InitDeferred(format!("{} ranges buffered", tags.len())));
    }
    let spread = geometry_spread(tags);
    if spread <= min_spread {
        return Err(Error::InitDeferred(format!(
            "tag positions too flat (spread {spread:.3} m)"
        )));
    }
    let n = tags.len() as f64;
    let centroid = tags.iter().sum::<Vector3<f64>>() / n;
    let mean_range = ranges.iter().sum::<f64>() / n;
    let mut cov = Matrix3::zeros();
    for t in tags {
        cov += (t - centroid) * (t - centroid).transpose();
    }
    let axes = cov.symmetric_eigen().eigenvectors;
    let mut seeds = vec![centroid];
    if let Some(lin) = multilateration(tags, ranges) {
        seeds.push(lin);
    }
    for i in 0..3 {
        let a: Vector3<f64> = axes.column(i).into();
        seeds.push(centroid + a * mean_range);
        seeds.push(centroid - a * mean_range);
    }
    let best = seeds
        .into_iter()
        .map(|s| gauss_newton(tags, ranges, s))
        .filter(|s| s.position.iter().all(|x| x.is_finite()))
        .min_by(|a, b| a.rms.total_cmp(&b.rms))
        .ok_or_else(|| Error::InitDeferred("no finite solution".into()))?;
    if !best.converged {
        return Err(Error::InitDeferred(format!(
            "Gauss-Newton did not converge (rms {:.3} m)",
            best.rms
        )));
    }
    Ok(best)
}

/// One buffered range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitEntry {
    pub timestamp: f64,
    pub range: f64,
}

/// Ranges buffered for one anchor. Each entry pins the clone at its
/// timestamp.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InitBuffer {
    pub anchor_id: usize,
    pub entries: Vec<InitEntry>,
}

impl InitBuffer {
    pub fn new(anchor_id: usize) -> Self {
        Self {
            anchor_id,
            entries: Vec::new(),
        }
    }

    /// Current tag positions from the (possibly updated) pinned clones.
    pub fn tag_positions(&self, s: &FilterState, e: &UwbExtrinsics) -> Result<Vec<Vector3<f64>>> {
        self.entries
            .iter()
            .map(|en| {
                let c = s.clone_index(en.timestamp).ok_or_else(|| {
                    Error::invalid(format!("no clone for buffered range at t={}", en.timestamp))
                })?;
                let c = &s.clones[c];
                Ok(c.position + c.rotation * e.tag())
            })
            .collect()
    }

    fn release(&mut self, s: &mut FilterState) {
        for en in self.entries.drain(..) {
            s.unpin_clone(en.timestamp);
        }
        s.prune_clones();
    }
}

/// Inserts the anchor at `p_u` with covariance from the buffered ranges and
/// applies the anchor-free remainder as a gated update. Returns whether the
/// remainder passed the gate.
pub fn init_covariance(
    s: &mut FilterState,
    buf: &InitBuffer,
    p_u: &Vector3<f64>,
    e: &UwbExtrinsics,
    sigma: f64,
    confidence: f64,
) -> Result<bool> {
    let n = buf.entries.len();
    if n < 3 {
        return Err(Error::InitDeferred(format!("{n} ranges buffered")));
    }
    let dim = s.dim();
    let mut h_x = DMatrix::zeros(n, dim);
    let mut h_f = DMatrix::zeros(n, 3);
    let mut r = DVector::zeros(n);
    for (row, en) in buf.entries.iter().enumerate() {
        let ci = s
            .clone_index(en.timestamp)
            .ok_or_else(|| Error::invalid(format!("no clone for buffered range at t={}", en.timestamp)))?;
        let c = &s.clones[ci];
        let tag = c.position + c.rotation * e.tag();
        let d = tag - p_u;
        let dist = d.norm();
        if dist < 1e-6 {
            return Err(Error::InitDeferred("tag coincides with the anchor".into()));
        }
        let hpu: RowVector3<f64> = d.transpose() / dist;
        let off = s.clone_offset(ci);
        let (theta_c, theta_core) = match s.param {
            ErrorParam::RightInvariant => (-hpu * skew(&tag), hpu * skew(p_u)),
            ErrorParam::Vector => (-hpu * skew(&(c.rotation * e.tag())), RowVector3::zeros()),
        };
        h_x.fixed_view_mut::<1, 3>(row, off).copy_from(&theta_c);
        h_x.fixed_view_mut::<1, 3>(row, off + 3).copy_from(&hpu);
        let core = h_x.fixed_view::<1, 3>(row, 0) + theta_core;
        h_x.fixed_view_mut::<1, 3>(row, 0).copy_from(&core);
        h_f.fixed_view_mut::<1, 3>(row, 0).copy_from(&(-hpu));
        r[row] = en.range - e.range_bias - dist;
    }

    let qr = h_f.qr();
    let rf = qr.r();
    let diag = rf.diagonal().abs();
    if diag.min() <= 1e-9 * diag.max().max(f64::MIN_POSITIVE) {
        return Err(Error::InitDeferred("anchor Jacobian is rank deficient".into()));
    }
    qr.q_tr_mul(&mut h_x);
    qr.q_tr_mul(&mut r);
    let hf1 = rf.fixed_view::<3, 3>(0, 0).clone_owned();
    let hf1_inv = hf1
        .try_inverse()
        .ok_or_else(|| Error::InitDeferred("anchor block not invertible".into()))?;
    let hx1 = h_x.rows(0, 3).clone_owned();
    let hf1_inv = DMatrix::from_iterator(3, 3, hf1_inv.iter().copied());

    let p = &s.covariance;
    let hx1_p = &hx1 * p;
    let r1 = DMatrix::identity(3, 3) * (sigma * sigma);
    let p_uu = &hf1_inv * (&hx1_p * hx1.transpose() + r1) * hf1_inv.transpose();
    let p_uu = (&p_uu + p_uu.transpose()) * 0.5;
    let p_ux = -(&hf1_inv * hx1_p);
    // Consistency of the mean with the stacked solution.
    let anchor = p_u + Vector3::from_iterator((&hf1_inv * r.rows(0, 3)).iter().copied());
    s.insert_anchor(buf.anchor_id, anchor, &p_uu, &p_ux)?;

    if n <= 3 {
        return Ok(true);
    }
    let slot = s.anchor_slot(buf.anchor_id).expect("just inserted");
    let h2 = h_x
        .rows(3, n - 3)
        .clone_owned()
        .insert_columns(s.anchor_offset(slot), 3, 0.0);
    let pkt = UpdatePacket::isotropic(h2, r.rows(3, n - 3).clone_owned(), sigma)?;
    if chi2_gate_with(&pkt, &s.covariance, confidence) {
        s.kalman_update(&pkt)?;
        Ok(true)
    } else {
        log::debug!("anchor {}: remaining init rows gated", buf.anchor_id);
        Ok(false)
    }
}

/// What happened to one range handed to the initializer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitOutcome {
    /// Anchor already in the state; the caller should update with it.
    AlreadyInitialized,
    Buffered,
    /// No clone at the range timestamp, so it cannot be buffered.
    Skipped,
    Initialized,
}

/// Per-anchor buffering and the trigger logic.
#[derive(Clone, Debug, Default)]
pub struct AnchorInitializer {
    pub config: AnchorInitConfig,
    buffers: BTreeMap<usize, InitBuffer>,
}

impl AnchorInitializer {
    pub fn new(config: AnchorInitConfig) -> Self {
        Self {
            config,
            buffers: BTreeMap::new(),
        }
    }

    pub fn buffered(&self, anchor_id: usize) -> usize {
        self.buffers.get(&anchor_id).map_or(0, |b| b.entries.len())
    }

    /// Buffers the range and initializes the anchor when possible. The
    /// range must share its timestamp with a clone in the state.
    pub fn maybe_initialize(
        &mut self,
        s: &mut FilterState,
        m: &RangeMeasurement,
        e: &UwbExtrinsics,
        sigma: f64,
        confidence: f64,
    ) -> Result<InitOutcome> {
        if s.is_anchor_initialized(m.anchor_id) {
            return Ok(InitOutcome::AlreadyInitialized);
        }
        if !s.pin_clone(m.timestamp) {
            return Ok(InitOutcome::Skipped);
        }
        let window = self.config.window.max(4);
        let buf = self
            .buffers
            .entry(m.anchor_id)
            .or_insert_with(|| InitBuffer::new(m.anchor_id));
        buf.entries.push(InitEntry {
            timestamp: m.timestamp,
            range: m.range,
        });
        while buf.entries.len() > window {
            let old = buf.entries.remove(0);
            s.unpin_clone(old.timestamp);
        }
        if buf.entries.len() < window {
            return Ok(InitOutcome::Buffered);
        }
        let tags = buf.tag_positions(s, e)?;
        let ranges: Vec<f64> = buf.entries.iter().map(|en| en.range - e.range_bias).collect();
        let sol = match solve_anchor_nls(&tags, &ranges, self.config.min_spread) {
            Ok(sol) => sol,
            Err(Error::InitDeferred(msg)) => {
                log::trace!("anchor {}: {msg}", m.anchor_id);
                s.prune_clones();
                return Ok(InitOutcome::Buffered);
            }
            Err(err) => return Err(err),
        };
        match init_covariance(s, buf, &sol.position, e, sigma, confidence) {
            Ok(_) => {
                let mut buf = self.buffers.remove(&m.anchor_id).expect("present");
                buf.release(s);
                log::debug!(
                    "anchor {} initialized at {:?} (rms {:.3} m)",
                    m.anchor_id,
                    sol.position,
                    sol.rms
                );
                Ok(InitOutcome::Initialized)
            }
            Err(Error::InitDeferred(msg)) => {
                log::trace!("anchor {}: {msg}", m.anchor_id);
                Ok(InitOutcome::Buffered)
            }
            Err(err) => Err(err),
        }
    }
}
