//! Standard vector-error MSCKF without ranging.
//!
//! The baseline shares the clone window, triangulation, gating and
//! compression with the invariant filter. Only the error parameterization
//! and therefore the Jacobians differ, so any consistency gap between the
//! two is attributable to that single choice.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::propagation::{propagate, ImuSample, NoiseParams};
use crate::state::{ErrorParam, FilterState, ImuBias};
use crate::visual::{update_tracks, CameraExtrinsics, FeatureTrack, VisualUpdateStats};

/// A [`FilterState`] whose error is θ̃ = log(R̂Rᵀ), ṽ = v̂ − v, p̃ = p̂ − p.
pub type VectorErrorState = FilterState;

/// Builds a baseline state. `covariance` is 15×15 in vector-error coordinates.
#[allow(clippy::too_many_arguments)]
pub fn baseline_state(
    timestamp: f64,
    rotation: Matrix3<f64>,
    velocity: Vector3<f64>,
    position: Vector3<f64>,
    bias: ImuBias,
    covariance: DMatrix<f64>,
    max_clones: usize,
) -> Result<VectorErrorState> {
    FilterState::new(
        ErrorParam::Vector,
        timestamp,
        rotation,
        velocity,
        position,
        bias,
        covariance,
        max_clones,
    )
}

fn require_vector(s: &VectorErrorState) -> Result<()> {
    if s.param != ErrorParam::Vector {
        return Err(Error::invalid("baseline operation on an invariant-error state"));
    }
    if s.num_anchors() > 0 {
        return Err(Error::invalid("baseline state carries no anchors"));
    }
    Ok(())
}

/// EKF propagation with the vector-error transition, relinearized at the
/// current estimate.
pub fn baseline_propagate(
    s: &mut VectorErrorState,
    samples: &[ImuSample],
    t_end: f64,
    noise: &NoiseParams,
) -> Result<()> {
    require_vector(s)?;
    propagate(s, samples, t_end, noise)
}

/// MSCKF visual update with nullspace projection of the feature.
pub fn baseline_visual_update(
    s: &mut VectorErrorState,
    tracks: &[FeatureTrack],
    ext: &CameraExtrinsics,
    sigma: f64,
    confidence: f64,
) -> Result<VisualUpdateStats> {
    require_vector(s)?;
    update_tracks(s, tracks, ext, sigma, confidence)
}
