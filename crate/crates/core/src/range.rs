//! UWB range update against jointly estimated anchors.

use nalgebra::{DMatrix, DVector, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::skew;
use crate::state::{chi2_gate_with, ErrorParam, FilterState, UpdatePacket};

/// Below this tag-anchor distance the range direction is undefined.
pub const MIN_RANGE_DISTANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeMeasurement {
    pub timestamp: f64,
    pub tag_id: usize,
    pub anchor_id: usize,
    pub range: f64,
}

/// Tag lever arm in the IMU frame and constant range bias.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UwbExtrinsics {
    pub tag_offset: [f64; 3],
    pub range_bias: f64,
}

impl Default for UwbExtrinsics {
    fn default() -> Self {
        Self {
            tag_offset: [0.05, 0.0, 0.1],
            range_bias: 0.0,
        }
    }
}

impl UwbExtrinsics {
    pub fn tag(&self) -> Vector3<f64> {
        Vector3::from(self.tag_offset)
    }
}

/// Counts from one batch of range updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RangeUpdateStats {
    pub applied: usize,
    pub gated: usize,
    pub degenerate: usize,
}

fn tag_to_anchor(s: &FilterState, e: &UwbExtrinsics, anchor_id: usize) -> Result<Vector3<f64>> {
    let u = s
        .anchor_position(anchor_id)
        .ok_or(Error::AnchorUninitialized(anchor_id))?;
    Ok(s.position() + s.rotation() * e.tag() - u)
}

/// Predicted range `‖p + R·p_T − p_u‖ + b`.
pub fn range_predict(s: &FilterState, e: &UwbExtrinsics, anchor_id: usize) -> Result<f64> {
    Ok(tag_to_anchor(s, e, anchor_id)?.norm() + e.range_bias)
}

/// One-row packet for a range measurement.
pub fn range_jacobian(
    s: &FilterState,
    e: &UwbExtrinsics,
    m: &RangeMeasurement,
    sigma: f64,
) -> Result<UpdatePacket> {
    let d = tag_to_anchor(s, e, m.anchor_id)?;
    let dist = d.norm();
    if dist < MIN_RANGE_DISTANCE {
        return Err(Error::DegenerateGeometry(format!(
            "tag coincides with anchor {}",
            m.anchor_id
        )));
    }
    let hpu: RowVector3<f64> = d.transpose() / dist;
    let slot = s.anchor_slot(m.anchor_id).expect("checked above");
    let mut h = DMatrix::zeros(1, s.dim());
    let theta = match s.param {
        // Λ = ⌊p̂_u − p̂ − R̂ p_T ×⌋ = −⌊d×⌋
        ErrorParam::RightInvariant => hpu * (-skew(&d)),
        ErrorParam::Vector => hpu * (-skew(&(s.rotation() * e.tag()))),
    };
    h.fixed_view_mut::<1, 3>(0, 0).copy_from(&theta);
    h.fixed_view_mut::<1, 3>(0, 6).copy_from(&hpu);
    h.fixed_view_mut::<1, 3>(0, s.anchor_offset(slot))
        .copy_from(&(-hpu));
    let r = DVector::from_element(1, m.range - (dist + e.range_bias));
    UpdatePacket::isotropic(h, r, sigma)
}

/// Sequential gated updates, one row per measurement. Measurements for
/// anchors that are not in the state are skipped.
pub fn apply_range_update(
    s: &mut FilterState,
    e: &UwbExtrinsics,
    measurements: &[RangeMeasurement],
    sigma: f64,
    confidence: f64,
) -> Result<RangeUpdateStats> {
    let mut stats = RangeUpdateStats::default();
    for m in measurements {
        if !s.is_anchor_initialized(m.anchor_id) {
            continue;
        }
        let pkt = match range_jacobian(s, e, m, sigma) {
            Ok(p) => p,
            Err(Error::DegenerateGeometry(msg)) => {
                log::debug!("range skipped: {msg}");
                stats.degenerate += 1;
                continue;
            }
            Err(err) => return Err(err),
        };
        if !chi2_gate_with(&pkt, &s.covariance, confidence) {
            stats.gated += 1;
            continue;
        }
        s.kalman_update(&pkt)?;
        stats.applied += 1;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::exp_so3;
    use crate::state::{ImuBias, GATE_CONFIDENCE};
    use nalgebra::Matrix3;

    fn with_anchor(p: Vector3<f64>, u: Vector3<f64>) -> FilterState {
        let mut s = FilterState::new(
            ErrorParam::RightInvariant,
            0.0,
            Matrix3::identity(),
            Vector3::zeros(),
            p,
            ImuBias::default(),
            DMatrix::identity(15, 15) * 0.01,
            11,
        )
        .unwrap();
        s.insert_anchor(0, u, &(DMatrix::identity(3, 3) * 0.25), &DMatrix::zeros(3, 15))
            .unwrap();
        s
    }

    fn no_lever(bias: f64) -> UwbExtrinsics {
        UwbExtrinsics {
            tag_offset: [0.0; 3],
            range_bias: bias,
        }
    }

    fn meas(range: f64) -> RangeMeasurement {
        RangeMeasurement {
            timestamp: 0.0,
            tag_id: 0,
            anchor_id: 0,
            range,
        }
    }

    #[test]
    fn three_four_five() {
        let s = with_anchor(Vector3::zeros(), Vector3::new(3.0, 4.0, 0.0));
        assert_eq!(range_predict(&s, &no_lever(0.0), 0).unwrap(), 5.0);
        assert!((range_predict(&s, &no_lever(0.2), 0).unwrap() - 5.2).abs() < 1e-15);
    }

    #[test]
    fn lever_arm() {
        let s = with_anchor(Vector3::zeros(), Vector3::new(1.1, 0.0, 0.0));
        let e = UwbExtrinsics {
            tag_offset: [0.1, 0.0, 0.0],
            range_bias: 0.0,
        };
        assert!((range_predict(&s, &e, 0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uninitialized_anchor() {
        let s = with_anchor(Vector3::zeros(), Vector3::x());
        assert!(matches!(
            range_predict(&s, &no_lever(0.0), 3),
            Err(Error::AnchorUninitialized(3))
        ));
    }

    #[test]
    fn unit_direction_blocks() {
        let s = with_anchor(Vector3::zeros(), Vector3::x());
        let pkt = range_jacobian(&s, &no_lever(0.0), &meas(1.0), 0.1).unwrap();
        let h = &pkt.h;
        assert_eq!(h.view((0, 6), (1, 3)), RowVector3::new(-1.0, 0.0, 0.0));
        assert_eq!(h.view((0, 9), (1, 3)), RowVector3::new(1.0, 0.0, 0.0));
        // Λ = ⌊x×⌋ and (−x)ᵀ⌊x×⌋ = 0
        assert!(h.view((0, 0), (1, 3)).amax() < 1e-15);
        assert!(h.view((0, 3), (1, 3)).amax() == 0.0);
        assert!(h.columns(12, 6).amax() == 0.0);
        assert_eq!(pkt.r[0], 0.0);
    }

    #[test]
    fn degenerate_when_coincident() {
        let s = with_anchor(Vector3::x(), Vector3::x());
        assert!(matches!(
            range_jacobian(&s, &no_lever(0.0), &meas(0.0), 0.1),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn unit_row_and_zero_blocks() {
        let mut s = with_anchor(Vector3::new(0.3, -1.0, 2.0), Vector3::new(4.0, 1.0, 0.5));
        s.core.rotation = exp_so3(&Vector3::new(0.4, 0.1, -0.7));
        s.augment_clone(0.0);
        let e = UwbExtrinsics::default();
        let pkt = range_jacobian(&s, &e, &meas(4.0), 0.1).unwrap();
        let hpu = pkt.h.view((0, 6), (1, 3));
        assert!((hpu.norm() - 1.0).abs() < 1e-12);
        assert_eq!(pkt.h.view((0, 3), (1, 3)).amax(), 0.0);
        assert_eq!(pkt.h.columns(18, 6).amax(), 0.0);
        assert_eq!(pkt.h.columns(12, 6).amax(), 0.0);
    }

    #[test]
    fn zero_residual_keeps_state() {
        let mut s = with_anchor(Vector3::zeros(), Vector3::new(3.0, 4.0, 0.0));
        let before = s.clone();
        let st = apply_range_update(&mut s, &no_lever(0.0), &[meas(5.0)], 0.1, GATE_CONFIDENCE).unwrap();
        assert_eq!(st.applied, 1);
        assert_eq!(s.core, before.core);
        let tr = |s: &FilterState| s.covariance.view((9, 9), (3, 3)).trace();
        assert!(tr(&s) <= tr(&before));
    }

    #[test]
    fn shrinks_along_line_of_sight() {
        let mut s = with_anchor(Vector3::zeros(), Vector3::new(30.0, 0.0, 0.0));
        let before = s.covariance.clone();
        apply_range_update(&mut s, &no_lever(0.0), &[meas(30.0)], 0.1, GATE_CONFIDENCE).unwrap();
        let along = before[(6, 6)] - s.covariance[(6, 6)];
        let across = before[(7, 7)] - s.covariance[(7, 7)];
        assert!(along > 0.0);
        assert!(along > across + 1e-6);
    }

    #[test]
    fn outlier_gated() {
        let mut s = with_anchor(Vector3::zeros(), Vector3::new(3.0, 4.0, 0.0));
        let st = apply_range_update(&mut s, &no_lever(0.0), &[meas(50.0)], 0.1, GATE_CONFIDENCE).unwrap();
        assert_eq!(st.gated, 1);
        assert_eq!(st.applied, 0);
    }

    #[test]
    fn yaw_and_translation_invariance() {
        let mut s = with_anchor(Vector3::new(1.0, 2.0, 0.5), Vector3::new(-3.0, 4.0, 2.0));
        s.core.rotation = exp_so3(&Vector3::new(0.2, -0.3, 0.9));
        let e = UwbExtrinsics::default();
        let base = range_predict(&s, &e, 0).unwrap();
        let yaw = exp_so3(&Vector3::new(0.0, 0.0, 1.234));
        let shift = Vector3::new(5.0, -7.0, 3.0);
        let mut t = s.clone();
        t.core.rotation = yaw * s.core.rotation;
        for (tc, sc) in t.core.columns.iter_mut().zip(&s.core.columns) {
            *tc = yaw * sc;
        }
        t.core.columns[1] += shift;
        t.core.columns[2] += shift;
        assert!((range_predict(&t, &e, 0).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn stationary_anchor_converges() {
        // Truth anchor at (3, 4, 0); filter starts 0.3 m off with a tight pose.
        let truth_u = Vector3::new(3.0, 4.0, 0.0);
        let mut s = with_anchor(Vector3::zeros(), truth_u + Vector3::new(0.3, -0.2, 0.1));
        s.covariance = DMatrix::identity(18, 18) * 1e-8;
        for i in 9..12 {
            s.covariance[(i, i)] = 0.25;
        }
        let e = no_lever(0.0);
        for _ in 0..50 {
            apply_range_update(&mut s, &e, &[meas(truth_u.norm())], 0.1, 0.9999).unwrap();
        }
        let r = truth_u.norm() - range_predict(&s, &e, 0).unwrap();
        assert!(r.abs() < 1e-3, "residual {r}");
    }
}
