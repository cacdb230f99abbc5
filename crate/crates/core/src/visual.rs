//! MSCKF visual update: triangulation, per-feature Jacobians, left-nullspace
//! projection of the feature and QR compression of the stacked rows.
//!
//! Features are kept out of the state. Their error is a plain global vector,
//! so a clone with invariant error `(θ, ξ_p)` sees the rotation block
//! `H_f ⌊p̂_f×⌋` and the position block `−H_f`, where
//! `H_f = H_pc · ᶜR_I · R̂ᵀ`.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::skew;
use crate::state::{chi2_gate_with, CloneState, ErrorParam, FilterState, UpdatePacket};

pub const MIN_PARALLAX: f64 = 1e-3;
pub const MIN_DEPTH: f64 = 1e-6;
const GN_ITERATIONS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BearingObservation {
    pub timestamp: f64,
    pub feature_id: usize,
    /// Normalized image coordinates (x/z, y/z).
    pub uv: Vector2<f64>,
}

/// Camera mounting: `ᶜp = ᶜR_I · ᴵp + ᶜp_I`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraExtrinsics {
    /// Rows of `ᶜR_I`.
    pub rotation_ci: [[f64; 3]; 3],
    /// `ᶜp_I`, the IMU origin in the camera frame.
    pub position_ci: [f64; 3],
}

impl Default for CameraExtrinsics {
    /// Forward-looking camera (optical axis along IMU x) mounted 10 cm ahead.
    fn default() -> Self {
        Self {
            rotation_ci: [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]],
            position_ci: [0.0, 0.0, -0.1],
        }
    }
}

impl CameraExtrinsics {
    pub fn identity() -> Self {
        Self {
            rotation_ci: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            position_ci: [0.0; 3],
        }
    }

    pub fn r_ci(&self) -> Matrix3<f64> {
        let r = &self.rotation_ci;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn p_ci(&self) -> Vector3<f64> {
        Vector3::from(self.position_ci)
    }

    /// Landmark in the camera frame of an IMU pose.
    pub fn to_camera(&self, r: &Matrix3<f64>, p: &Vector3<f64>, pf: &Vector3<f64>) -> Vector3<f64> {
        self.r_ci() * (r.transpose() * (pf - p)) + self.p_ci()
    }

    /// Optical center in the global frame.
    pub fn center(&self, r: &Matrix3<f64>, p: &Vector3<f64>) -> Vector3<f64> {
        p - r * (self.r_ci().transpose() * self.p_ci())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    pub feature_id: usize,
    pub observations: Vec<BearingObservation>,
}

/// Per-feature Jacobians before nullspace projection.
#[derive(Clone, Debug)]
pub struct FeatureJacobians {
    pub h_x: DMatrix<f64>,
    pub h_f: DMatrix<f64>,
    pub r: DVector<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VisualUpdateStats {
    pub used: usize,
    pub rejected: usize,
    pub gated: usize,
    pub rows: usize,
    /// Largest reprojection residual among used features (normalized units).
    pub max_residual: f64,
}

pub fn project(pc: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(pc.x / pc.z, pc.y / pc.z)
}

/// `∂Π/∂ᶜp` at `pc`.
pub fn projection_jacobian(pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    Matrix2x3::new(iz, 0.0, -pc.x * iz * iz, 0.0, iz, -pc.y * iz * iz)
}

fn observing_clones<'a>(
    track: &FeatureTrack,
    clones: &'a [CloneState],
) -> Vec<(&'a CloneState, Vector2<f64>)> {
    track
        .observations
        .iter()
        .filter_map(|o| {
            clones
                .iter()
                .find(|c| (c.timestamp - o.timestamp).abs() < crate::state::TIME_EPS)
                .map(|c| (c, o.uv))
        })
        .collect()
}

/// Global landmark position from a track, by linear midpoint initialization
/// followed by Gauss-Newton on the reprojection error.
pub fn triangulate(
    track: &FeatureTrack,
    clones: &[CloneState],
    ext: &CameraExtrinsics,
) -> Result<Vector3<f64>> {
    let obs = observing_clones(track, clones);
    if obs.len() < 2 {
        return Err(Error::TrackRejected(format!(
            "feature {}: {} usable observations",
            track.feature_id,
            obs.len()
        )));
    }
    let rci_t = ext.r_ci().transpose();
    let rays: Vec<(Vector3<f64>, Vector3<f64>)> = obs
        .iter()
        .map(|(c, uv)| {
            let b = (c.rotation * rci_t * Vector3::new(uv.x, uv.y, 1.0)).normalize();
            (ext.center(&c.rotation, &c.position), b)
        })
        .collect();
    let parallax = rays
        .iter()
        .flat_map(|(_, a)| rays.iter().map(move |(_, b)| a.dot(b).clamp(-1.0, 1.0).acos()))
        .fold(0.0_f64, f64::max);
    if parallax < MIN_PARALLAX {
        return Err(Error::TrackRejected(format!(
            "feature {}: parallax {parallax:.2e} rad",
            track.feature_id
        )));
    }
    let mut a = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for (c, b) in &rays {
        let proj = Matrix3::identity() - b * b.transpose();
        a += proj;
        rhs += proj * c;
    }
    let mut x = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::TrackRejected(format!("feature {}: singular rays", track.feature_id)))?;

    let cost = |x: &Vector3<f64>| -> Option<f64> {
        let mut sum = 0.0;
        for (c, uv) in &obs {
            let pc = ext.to_camera(&c.rotation, &c.position, x);
            if pc.z <= MIN_DEPTH {
                return None;
            }
            sum += (uv - project(&pc)).norm_squared();
        }
        Some(sum)
    };
    let mut current = cost(&x);
    for _ in 0..GN_ITERATIONS {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (c, uv) in &obs {
            let pc = ext.to_camera(&c.rotation, &c.position, &x);
            if pc.z <= MIN_DEPTH {
                continue;
            }
            let j = projection_jacobian(&pc) * ext.r_ci() * c.rotation.transpose();
            let r = uv - project(&pc);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let Some(dx) = jtj.cholesky().map(|ch| ch.solve(&jtr)) else {
            break;
        };
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-4 {
            let cand = x + dx * step;
            let c = cost(&cand);
            if let Some(cv) = c {
                if current.is_none_or(|cur| cv <= cur) {
                    x = cand;
                    current = c;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted || dx.norm() * step < 1e-12 * (1.0 + x.norm()) {
            break;
        }
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::TrackRejected(format!(
            "feature {}: diverged",
            track.feature_id
        )));
    }
    for (c, _) in &obs {
        if ext.to_camera(&c.rotation, &c.position, &x).z <= MIN_DEPTH {
            return Err(Error::TrackRejected(format!(
                "feature {}: behind an observing camera",
                track.feature_id
            )));
        }
    }
    Ok(x)
}

/// Stacked 2-row blocks for every observation matched to a clone.
pub fn visual_jacobians(
    track: &FeatureTrack,
    pf: &Vector3<f64>,
    s: &FilterState,
    ext: &CameraExtrinsics,
) -> Result<FeatureJacobians> {
    let rci = ext.r_ci();
    // clone index, H_f block, rotation block, residual
    type Row = (usize, Matrix2x3<f64>, Matrix2x3<f64>, Vector2<f64>);
    let mut rows: Vec<Row> = Vec::new();
    for o in &track.observations {
        let Some(ci) = s.clone_index(o.timestamp) else {
            continue;
        };
        let c = &s.clones[ci];
        let pc = ext.to_camera(&c.rotation, &c.position, pf);
        if pc.z <= MIN_DEPTH {
            continue;
        }
        let hf = projection_jacobian(&pc) * rci * c.rotation.transpose();
        let lever = match s.param {
            ErrorParam::RightInvariant => *pf,
            ErrorParam::Vector => pf - c.position,
        };
        rows.push((ci, hf, hf * skew(&lever), o.uv - project(&pc)));
    }
    if rows.len() < 2 {
        return Err(Error::TrackRejected(format!(
            "feature {}: fewer than two valid observations",
            track.feature_id
        )));
    }
    let m = 2 * rows.len();
    let mut h_x = DMatrix::zeros(m, s.dim());
    let mut h_f = DMatrix::zeros(m, 3);
    let mut r = DVector::zeros(m);
    for (k, (ci, hf, htheta, res)) in rows.iter().enumerate() {
        let off = s.clone_offset(*ci);
        h_x.fixed_view_mut::<2, 3>(2 * k, off).copy_from(htheta);
        h_x.fixed_view_mut::<2, 3>(2 * k, off + 3).copy_from(&(-hf));
        h_f.fixed_view_mut::<2, 3>(2 * k, 0).copy_from(hf);
        r.fixed_rows_mut::<2>(2 * k).copy_from(res);
    }
    Ok(FeatureJacobians { h_x, h_f, r })
}

/// Projects onto the left nullspace of `H_f`, removing the feature.
pub fn nullspace_project(j: FeatureJacobians, sigma: f64) -> Result<UpdatePacket> {
    let m = j.h_f.nrows();
    if m < 4 {
        return Err(Error::TrackRejected(format!("{m} rows leave no constraint")));
    }
    let qr = j.h_f.qr();
    let rdiag = qr.r().diagonal().abs();
    if rdiag.min() <= 1e-9 * rdiag.max().max(f64::MIN_POSITIVE) {
        return Err(Error::TrackRejected("feature Jacobian is rank deficient".into()));
    }
    let mut h = j.h_x;
    let mut r = j.r;
    qr.q_tr_mul(&mut h);
    qr.q_tr_mul(&mut r);
    let h = h.rows(3, m - 3).clone_owned();
    let r = r.rows(3, m - 3).clone_owned();
    UpdatePacket::isotropic(h, r, sigma)
}

/// Reduces a tall isotropic-noise system to at most `ncols` rows.
pub fn compress(p: UpdatePacket) -> UpdatePacket {
    let (m, n) = p.h.shape();
    if m <= n {
        return p;
    }
    let sigma2 = p.noise[(0, 0)];
    let qr = p.h.qr();
    let mut r = p.r;
    qr.q_tr_mul(&mut r);
    let h = qr.r();
    UpdatePacket {
        h,
        r: r.rows(0, n).clone_owned(),
        noise: DMatrix::identity(n, n) * sigma2,
    }
}

/// Gates each packet, stacks the survivors, compresses and updates.
pub fn compress_and_update(
    s: &mut FilterState,
    packets: Vec<UpdatePacket>,
    confidence: f64,
) -> Result<(usize, usize)> {
    let mut kept = Vec::with_capacity(packets.len());
    let mut gated = 0;
    for p in packets {
        if chi2_gate_with(&p, &s.covariance, confidence) {
            kept.push(p);
        } else {
            gated += 1;
        }
    }
    let used = kept.len();
    if let Some(stacked) = UpdatePacket::stack(&kept) {
        s.kalman_update(&compress(stacked))?;
    }
    Ok((used, gated))
}

/// Triangulates, projects and applies a set of tracks in one update.
pub fn update_tracks(
    s: &mut FilterState,
    tracks: &[FeatureTrack],
    ext: &CameraExtrinsics,
    sigma: f64,
    confidence: f64,
) -> Result<VisualUpdateStats> {
    let mut stats = VisualUpdateStats::default();
    let mut packets = Vec::new();
    for t in tracks {
        let built = triangulate(t, &s.clones, ext)
            .and_then(|pf| visual_jacobians(t, &pf, s, ext))
            .and_then(|j| {
                let res = j.r.amax();
                nullspace_project(j, sigma).map(|p| (p, res))
            });
        match built {
            Ok((p, res)) => {
                stats.max_residual = stats.max_residual.max(res);
                stats.rows += p.rows();
                packets.push(p);
            }
            Err(Error::TrackRejected(msg)) => {
                log::trace!("{msg}");
                stats.rejected += 1;
            }
            Err(e) => return Err(e),
        }
    }
    let (used, gated) = compress_and_update(s, packets, confidence)?;
    stats.used = used;
    stats.gated = gated;
    Ok(stats)
}
