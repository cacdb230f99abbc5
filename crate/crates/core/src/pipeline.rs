//! Estimator driver: replays IMU, feature and range streams through either
//! filter and records the estimate at every measurement epoch.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::anchor_init::{AnchorInitConfig, AnchorInitializer, InitOutcome};
use crate::error::{Error, Result};
use crate::liegroup::skew;
use crate::propagation::{propagate, ImuSample, NoiseParams};
use crate::range::{apply_range_update, RangeMeasurement, UwbExtrinsics};
use crate::sim::{stream_rng, SimData, Stream};
use crate::state::{ErrorParam, FilterState, ImuBias, GATE_CONFIDENCE, TIME_EPS};
use crate::visual::{update_tracks, BearingObservation, CameraExtrinsics, FeatureTrack};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Cviro,
    VioBaseline,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Cviro => "cviro",
            EstimatorKind::VioBaseline => "vio-baseline",
        }
    }

    pub fn param(self) -> ErrorParam {
        match self {
            EstimatorKind::Cviro => ErrorParam::RightInvariant,
            EstimatorKind::VioBaseline => ErrorParam::Vector,
        }
    }

    pub fn uses_uwb(self) -> bool {
        self == EstimatorKind::Cviro
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cviro" => Ok(EstimatorKind::Cviro),
            "vio-baseline" => Ok(EstimatorKind::VioBaseline),
            other => Err(Error::Config(format!("unknown estimator '{other}'"))),
        }
    }
}

/// Initial standard deviations of the filter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSigma {
    pub rotation: f64,
    pub velocity: f64,
    pub position: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
}

impl Default for InitialSigma {
    fn default() -> Self {
        Self {
            rotation: 0.005,
            velocity: 0.05,
            position: 0.01,
            gyro_bias: 2e-3,
            accel_bias: 2e-2,
        }
    }
}

impl InitialSigma {
    pub fn covariance(&self) -> DMatrix<f64> {
        let s = [
            self.rotation,
            self.velocity,
            self.position,
            self.gyro_bias,
            self.accel_bias,
        ];
        DMatrix::from_diagonal(&DVector::from_fn(15, |i, _| s[i / 3] * s[i / 3]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub max_clones: usize,
    pub gate_confidence: f64,
    pub min_track_length: usize,
    /// Tracks reaching this many observations are used and restarted;
    /// 0 means the clone window size.
    pub max_track_length: usize,
    pub anchor_init: AnchorInitConfig,
    /// Noise the filter assumes; independent of the data generator.
    pub noise: NoiseParams,
    pub initial_sigma: InitialSigma,
    /// Start from the truth displaced by a draw from the initial covariance.
    pub perturb_initial: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_clones: 11,
            gate_confidence: GATE_CONFIDENCE,
            min_track_length: 3,
            max_track_length: 0,
            anchor_init: AnchorInitConfig::default(),
            noise: NoiseParams::default(),
            initial_sigma: InitialSigma::default(),
            perturb_initial: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_clones < 2 {
            return Err(Error::Config("max_clones must be at least 2".into()));
        }
        if !(self.gate_confidence > 0.0 && self.gate_confidence < 1.0) {
            return Err(Error::Config("gate_confidence must be in (0, 1)".into()));
        }
        if self.min_track_length < 2 {
            return Err(Error::Config("min_track_length must be at least 2".into()));
        }
        self.noise.validate()
    }
}

/// Starting point of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitialState {
    pub timestamp: f64,
    pub rotation: Matrix3<f64>,
    pub velocity: Vector3<f64>,
    pub position: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RunStats {
    pub epochs: usize,
    pub tracks_used: usize,
    pub tracks_gated: usize,
    pub tracks_rejected: usize,
    pub ranges_applied: usize,
    pub ranges_gated: usize,
    pub anchors_initialized: usize,
    /// Largest visual residual seen before any update, normalized coordinates.
    pub max_reprojection_residual: f64,
}

/// Estimate and marginal covariances at one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatePoint {
    pub timestamp: f64,
    pub rotation: Matrix3<f64>,
    pub velocity: Vector3<f64>,
    pub position: Vector3<f64>,
    pub bias: ImuBias,
    pub cov_rotation: Matrix3<f64>,
    pub cov_velocity: Matrix3<f64>,
    pub cov_position: Matrix3<f64>,
    /// Diagonal of P over θ, v, p, b_ω, b_a.
    pub variance: [f64; 15],
    /// Initialized anchors: id, position and Cartesian variances.
    pub anchors: Vec<(usize, Vector3<f64>, Vector3<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorEstimate {
    pub anchor_id: usize,
    pub position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub initialized_at: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub kind: EstimatorKind,
    pub points: Vec<EstimatePoint>,
    pub anchors: Vec<AnchorEstimate>,
    pub stats: RunStats,
}

fn core_variance(s: &FilterState) -> [f64; 15] {
    let p = &s.covariance;
    let b = s.bias_offset();
    let mut out = [0.0; 15];
    for (i, o) in out.iter_mut().enumerate() {
        let k = if i < 9 { i } else { b + i - 9 };
        *o = p[(k, k)];
    }
    out
}

/// One filter with its track and anchor bookkeeping.
pub struct Estimator {
    pub kind: EstimatorKind,
    pub state: FilterState,
    pub config: FilterConfig,
    pub camera: CameraExtrinsics,
    pub uwb: UwbExtrinsics,
    pub stats: RunStats,
    initializer: AnchorInitializer,
    tracks: BTreeMap<usize, Vec<BearingObservation>>,
    init_times: BTreeMap<usize, f64>,
}

fn block3(p: &DMatrix<f64>, at: usize) -> Matrix3<f64> {
    p.fixed_view::<3, 3>(at, at).clone_owned()
}

impl Estimator {
    pub fn new(
        kind: EstimatorKind,
        init: &InitialState,
        config: FilterConfig,
        camera: CameraExtrinsics,
        uwb: UwbExtrinsics,
    ) -> Result<Self> {
        config.validate()?;
        let state = FilterState::new(
            kind.param(),
            init.timestamp,
            init.rotation,
            init.velocity,
            init.position,
            ImuBias::default(),
            config.initial_sigma.covariance(),
            config.max_clones,
        )?;
        Ok(Self {
            kind,
            state,
            initializer: AnchorInitializer::new(config.anchor_init),
            config,
            camera,
            uwb,
            stats: RunStats::default(),
            tracks: BTreeMap::new(),
            init_times: BTreeMap::new(),
        })
    }

    /// Displaces the pose by a draw from the initial covariance.
    pub fn perturb_initial(&mut self, rng: &mut impl Rng) {
        let sd = self.config.initial_sigma;
        let mut d = DVector::zeros(self.state.dim());
        for (k, s) in [sd.rotation, sd.velocity, sd.position].iter().enumerate() {
            for i in 0..3 {
                d[3 * k + i] = s * rng.sample::<f64, _>(StandardNormal);
            }
        }
        self.state.apply_correction(&d);
    }

    pub fn snapshot(&self) -> EstimatePoint {
        let p = &self.state.covariance;
        EstimatePoint {
            timestamp: self.state.timestamp,
            rotation: *self.state.rotation(),
            velocity: *self.state.velocity(),
            position: *self.state.position(),
            bias: self.state.bias,
            cov_rotation: block3(p, 0),
            cov_velocity: block3(p, 3),
            cov_position: block3(p, 6),
            variance: core_variance(&self.state),
            anchors: self
                .anchors()
                .into_iter()
                .map(|a| (a.anchor_id, a.position, a.covariance.diagonal()))
                .collect(),
        }
    }

    /// Anchor estimates with their Cartesian covariance.
    pub fn anchors(&self) -> Vec<AnchorEstimate> {
        let p = &self.state.covariance;
        self.state
            .anchor_ids
            .iter()
            .enumerate()
            .map(|(slot, &id)| {
                let u = self.state.core.columns[2 + slot];
                let off = self.state.anchor_offset(slot);
                let puu = block3(p, off);
                let covariance = match self.state.param {
                    // u − û ≈ −⌊û×⌋θ + ξ_u
                    ErrorParam::RightInvariant => {
                        let j = -skew(&u);
                        let ptt = block3(p, 0);
                        let ptu = p.fixed_view::<3, 3>(0, off).clone_owned();
                        let cross = j * ptu;
                        j * ptt * j.transpose() + cross + cross.transpose() + puu
                    }
                    ErrorParam::Vector => puu,
                };
                AnchorEstimate {
                    anchor_id: id,
                    position: u,
                    covariance,
                    initialized_at: self.init_times.get(&id).copied().unwrap_or(f64::NAN),
                }
            })
            .collect()
    }

    fn tracks_to_update(&mut self, ids: &[usize]) -> Vec<FeatureTrack> {
        let min = self.config.min_track_length;
        let mut out = Vec::new();
        for id in ids {
            let Some(mut obs) = self.tracks.remove(id) else {
                continue;
            };
            obs.retain(|o| self.state.clone_index(o.timestamp).is_some());
            if obs.len() >= min {
                out.push(FeatureTrack {
                    feature_id: *id,
                    observations: obs,
                });
            }
        }
        out
    }

    fn visual_update(&mut self, tracks: Vec<FeatureTrack>) -> Result<()> {
        if tracks.is_empty() {
            return Ok(());
        }
        let st = update_tracks(
            &mut self.state,
            &tracks,
            &self.camera,
            self.config.noise.cam_sigma(),
            self.config.gate_confidence,
        )?;
        self.stats.tracks_used += st.used;
        self.stats.tracks_gated += st.gated;
        self.stats.tracks_rejected += st.rejected;
        self.stats.max_reprojection_residual = self.stats.max_reprojection_residual.max(st.max_residual);
        Ok(())
    }

    /// Processes every measurement stamped `t`. `features` and `ranges` must
    /// all carry timestamp `t`.
    pub fn process_epoch(
        &mut self,
        imu: &[ImuSample],
        t: f64,
        features: &[BearingObservation],
        ranges: &[RangeMeasurement],
    ) -> Result<()> {
        propagate(&mut self.state, imu, t, &self.config.noise)?;
        self.stats.epochs += 1;

        // Clones that the next augmentation pushes out of the window.
        let m = self.state.max_clones;
        let dying: Vec<f64> = self
            .state
            .clones
            .iter()
            .enumerate()
            .filter(|(i, c)| i + 1 >= m && !c.is_pinned())
            .map(|(_, c)| c.timestamp)
            .collect();
        if !dying.is_empty() {
            let ids: Vec<usize> = self
                .tracks
                .iter()
                .filter(|(_, obs)| {
                    obs.iter()
                        .any(|o| dying.iter().any(|d| (d - o.timestamp).abs() < TIME_EPS))
                })
                .map(|(id, _)| *id)
                .collect();
            let tracks = self.tracks_to_update(&ids);
            self.visual_update(tracks)?;
        }

        self.state.augment_clone(t);
        for o in features {
            self.tracks.entry(o.feature_id).or_default().push(*o);
        }
        let cap = match self.config.max_track_length {
            0 => m,
            n => n,
        };
        let lost: Vec<usize> = self
            .tracks
            .iter()
            .filter(|(_, obs)| {
                obs.len() >= cap || obs.last().is_none_or(|o| (o.timestamp - t).abs() > TIME_EPS)
            })
            .map(|(id, _)| *id)
            .collect();
        let tracks = self.tracks_to_update(&lost);
        self.visual_update(tracks)?;

        if self.kind.uses_uwb() {
            let sigma = self.config.noise.uwb_range_sigma;
            let conf = self.config.gate_confidence;
            for r in ranges {
                if self.state.is_anchor_initialized(r.anchor_id) {
                    let st =
                        apply_range_update(&mut self.state, &self.uwb, std::slice::from_ref(r), sigma, conf)?;
                    self.stats.ranges_applied += st.applied;
                    self.stats.ranges_gated += st.gated;
                } else if self
                    .initializer
                    .maybe_initialize(&mut self.state, r, &self.uwb, sigma, conf)?
                    == InitOutcome::Initialized
                {
                    self.stats.anchors_initialized += 1;
                    self.init_times.insert(r.anchor_id, t);
                }
            }
        }
        Ok(())
    }
}

/// Measurement epochs: sorted union of feature and range timestamps.
pub fn epochs(features: &[BearingObservation], ranges: &[RangeMeasurement]) -> Vec<f64> {
    let mut ts: Vec<f64> = features
        .iter()
        .map(|o| o.timestamp)
        .chain(ranges.iter().map(|r| r.timestamp))
        .collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup_by(|a, b| (*a - *b).abs() < TIME_EPS);
    ts
}

fn slice_at<T>(items: &[T], from: &mut usize, t: f64, time: impl Fn(&T) -> f64) -> std::ops::Range<usize> {
    while *from < items.len() && time(&items[*from]) < t - TIME_EPS {
        *from += 1;
    }
    let start = *from;
    while *from < items.len() && (time(&items[*from]) - t).abs() < TIME_EPS {
        *from += 1;
    }
    start..*from
}

/// Replays the dataset through one filter starting from `init`. `seed`
/// drives the initial perturbation when enabled.
#[allow(clippy::too_many_arguments)]
pub fn run_estimator(
    kind: EstimatorKind,
    data: &SimData,
    init: &InitialState,
    config: &FilterConfig,
    camera: &CameraExtrinsics,
    uwb: &UwbExtrinsics,
    seed: u64,
) -> Result<RunResult> {
    let mut est = Estimator::new(kind, init, config.clone(), *camera, *uwb)?;
    if config.perturb_initial {
        est.perturb_initial(&mut stream_rng(seed, Stream::Init));
    }
    let mut points = vec![est.snapshot()];
    let (mut fi, mut ri) = (0, 0);
    for t in epochs(&data.features, &data.ranges) {
        if t < init.timestamp - TIME_EPS {
            continue;
        }
        let f = slice_at(&data.features, &mut fi, t, |o| o.timestamp);
        let r = slice_at(&data.ranges, &mut ri, t, |m| m.timestamp);
        est.process_epoch(&data.imu, t, &data.features[f], &data.ranges[r])?;
        if (t - init.timestamp).abs() > TIME_EPS {
            points.push(est.snapshot());
        }
    }
    Ok(RunResult {
        kind,
        points,
        anchors: est.anchors(),
        stats: est.stats,
    })
}

/// Initial state taken from the first ground-truth sample.
pub fn initial_from_truth(data: &SimData) -> Result<InitialState> {
    let s = data
        .truth
        .first()
        .ok_or_else(|| Error::invalid("dataset has no ground truth"))?;
    Ok(InitialState {
        timestamp: s.timestamp,
        rotation: s.rotation,
        velocity: s.velocity,
        position: s.position,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, SimConfig};

    fn short(duration: f64) -> SimConfig {
        SimConfig {
            duration,
            ..SimConfig::default()
        }
    }

    #[test]
    fn epochs_are_unique_and_sorted() {
        let data = simulate(&short(2.0)).unwrap();
        let ts = epochs(&data.features, &data.ranges);
        assert_eq!(ts.len(), 21);
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn noise_free_run_is_exact() {
        let cfg = short(12.0).noise_free();
        let data = simulate(&cfg).unwrap();
        let init = initial_from_truth(&data).unwrap();
        let fc = FilterConfig {
            perturb_initial: false,
            ..FilterConfig::default()
        };
        for kind in [EstimatorKind::Cviro, EstimatorKind::VioBaseline] {
            let r = run_estimator(kind, &data, &init, &fc, &cfg.camera, &cfg.uwb, 1).unwrap();
            let last = r.points.last().unwrap();
            let truth = data.truth_at(last.timestamp);
            assert!((last.position - truth.position).norm() < 1e-6, "{kind:?}");
            assert!(r.stats.tracks_used > 0);
            assert!(r.stats.max_reprojection_residual < 1e-6);
            if kind == EstimatorKind::Cviro {
                assert_eq!(r.stats.anchors_initialized, 4);
                assert!(r.stats.ranges_applied > 0);
                for a in &r.anchors {
                    assert!((a.position - data.anchors[a.anchor_id].1).norm() < 1e-6);
                }
            } else {
                assert!(r.anchors.is_empty());
            }
        }
    }

    #[test]
    fn clone_window_is_bounded() {
        let cfg = short(3.0);
        let data = simulate(&cfg).unwrap();
        let init = initial_from_truth(&data).unwrap();
        let mut est = Estimator::new(
            EstimatorKind::VioBaseline,
            &init,
            FilterConfig::default(),
            cfg.camera,
            cfg.uwb,
        )
        .unwrap();
        let (mut fi, mut ri) = (0, 0);
        for t in epochs(&data.features, &data.ranges) {
            let f = slice_at(&data.features, &mut fi, t, |o| o.timestamp);
            let r = slice_at(&data.ranges, &mut ri, t, |m| m.timestamp);
            est.process_epoch(&data.imu, t, &data.features[f], &data.ranges[r])
                .unwrap();
            assert!(est.state.clones.len() <= 11);
            for obs in est.tracks.values() {
                for o in obs {
                    assert!(est.state.clone_index(o.timestamp).is_some());
                }
            }
        }
    }

    #[test]
    fn estimator_names_roundtrip() {
        for k in [EstimatorKind::Cviro, EstimatorKind::VioBaseline] {
            assert_eq!(k.name().parse::<EstimatorKind>().unwrap(), k);
        }
        assert!("msckf".parse::<EstimatorKind>().is_err());
    }
}
