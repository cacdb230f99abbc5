//! Browser bindings. Each export takes plain numbers and returns a JSON
//! string; the logic lives in ordinary functions so it is testable natively.

use cviro::anchor_init::solve_anchor_nls;
use cviro::eval::evaluate_run;
use cviro::observability::{audit, AuditConfig, NullspaceReport, Perturbation};
use cviro::pipeline::{initial_from_truth, run_estimator, EstimatorKind, FilterConfig, RunResult};
use cviro::sim::{gaussian3, simulate, stream_rng, SimConfig, SimData, Stream};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Trajectory points sent to the page are thinned to about this many.
const PLOT_POINTS: usize = 400;

#[derive(Serialize)]
pub struct EstimatorView {
    pub name: String,
    /// [t, x, y, z] per plotted epoch.
    pub path: Vec<[f64; 4]>,
    pub position_error: Vec<[f64; 2]>,
    pub final_position_error: f64,
    pub ate: f64,
    pub mean_pnees: f64,
    pub mean_onees: f64,
    pub anchors: Vec<AnchorView>,
}

#[derive(Serialize)]
pub struct AnchorView {
    pub id: usize,
    pub position: [f64; 3],
    pub sigma: [f64; 3],
    pub error: f64,
}

#[derive(Serialize)]
pub struct RunView {
    pub duration: f64,
    pub seed: u64,
    pub truth: Vec<[f64; 4]>,
    pub anchors: Vec<[f64; 3]>,
    pub estimators: Vec<EstimatorView>,
}

fn thin<T: Copy>(v: &[T]) -> Vec<T> {
    let step = v.len().div_ceil(PLOT_POINTS).max(1);
    v.iter().step_by(step).copied().collect()
}

fn mean_some(v: &[Option<f64>]) -> f64 {
    let vals: Vec<f64> = v.iter().flatten().copied().collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

fn view(r: &RunResult, data: &SimData) -> cviro::Result<EstimatorView> {
    let m = evaluate_run(r, data)?;
    let path: Vec<[f64; 4]> = r
        .points
        .iter()
        .map(|p| [p.timestamp, p.position.x, p.position.y, p.position.z])
        .collect();
    let err: Vec<[f64; 2]> = m
        .times
        .iter()
        .zip(&m.position_error_sq)
        .map(|(t, e)| [*t, e.sqrt()])
        .collect();
    let anchors = r
        .anchors
        .iter()
        .map(|a| {
            let truth = data
                .anchors
                .iter()
                .find(|(id, _)| *id == a.anchor_id)
                .map(|(_, p)| *p);
            AnchorView {
                id: a.anchor_id,
                position: a.position.into(),
                sigma: a.covariance.diagonal().map(f64::sqrt).into(),
                error: truth.map_or(f64::NAN, |t| (a.position - t).norm()),
            }
        })
        .collect();
    Ok(EstimatorView {
        name: r.kind.name().to_string(),
        path: thin(&path),
        position_error: thin(&err),
        final_position_error: m.final_position_error,
        ate: m.ate,
        mean_pnees: mean_some(&m.pnees),
        mean_onees: mean_some(&m.onees),
        anchors,
    })
}

/// Simulates the default scenario and runs both estimators on it.
pub fn run_view(duration: f64, seed: u64, pixel_sigma: f64) -> cviro::Result<RunView> {
    let mut sim = SimConfig {
        duration,
        seed,
        ..SimConfig::default()
    };
    sim.noise.cam_pixel_sigma = pixel_sigma;
    let mut filter = FilterConfig::default();
    filter.noise.cam_pixel_sigma = pixel_sigma.max(1e-3);
    let data = simulate(&sim)?;
    let init = initial_from_truth(&data)?;
    let mut estimators = Vec::new();
    for kind in [EstimatorKind::Cviro, EstimatorKind::VioBaseline] {
        let r = run_estimator(kind, &data, &init, &filter, &sim.camera, &sim.uwb, seed)?;
        estimators.push(view(&r, &data)?);
    }
    let truth: Vec<[f64; 4]> = data
        .truth
        .iter()
        .map(|s| [s.timestamp, s.position.x, s.position.y, s.position.z])
        .collect();
    Ok(RunView {
        duration,
        seed,
        truth: thin(&truth),
        anchors: data.anchors.iter().map(|(_, p)| (*p).into()).collect(),
        estimators,
    })
}

#[derive(Serialize)]
pub struct SpectrumEntry {
    pub label: String,
    pub nullity: usize,
    pub max_residual: f64,
    /// ‖O·n‖/‖O‖ for yaw, x, y, z.
    pub per_direction: [f64; 4],
    /// Singular values divided by the largest, descending.
    pub normalized_singular_values: Vec<f64>,
}

#[derive(Serialize)]
pub struct SpectrumView {
    pub perturbation_scale: f64,
    pub entries: Vec<SpectrumEntry>,
}

fn entry(label: &str, r: &NullspaceReport) -> SpectrumEntry {
    let top = r
        .singular_values
        .iter()
        .copied()
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut sv: Vec<f64> = r.singular_values.iter().map(|s| s / top).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    SpectrumEntry {
        label: label.to_string(),
        nullity: r.nullity,
        max_residual: r.max_residual,
        per_direction: r.per_direction,
        normalized_singular_values: sv,
    }
}

/// Observability spectra at the truth and at one linearization point
/// displaced by `scale` times the default perturbation.
pub fn spectrum_view(scale: f64, seed: u64) -> cviro::Result<SpectrumView> {
    let d = Perturbation::default();
    let cfg = AuditConfig {
        trials: 1,
        seed,
        perturbation: Perturbation {
            rotation: d.rotation * scale,
            velocity: d.velocity * scale,
            position: d.position * scale,
        },
        ..AuditConfig::default()
    };
    let rep = audit(&cfg)?;
    Ok(SpectrumView {
        perturbation_scale: scale,
        entries: vec![
            entry("invariant, truth", &rep.cviro_truth),
            entry("invariant, perturbed", &rep.cviro[0]),
            entry("vector, perturbed", &rep.baseline[0]),
        ],
    })
}

#[derive(Serialize)]
pub struct AnchorInitView {
    pub truth: [f64; 3],
    pub tags: Vec<[f64; 3]>,
    pub ok: bool,
    pub message: String,
    pub estimate: Option<[f64; 3]>,
    pub sigma: Option<[f64; 3]>,
    pub error: Option<f64>,
    pub rms: Option<f64>,
    pub iterations: Option<usize>,
}

/// Solves for an anchor from `n` noisy ranges taken along a wobbling loop
/// of radius `spread` metres.
pub fn anchor_view(n: usize, range_sigma: f64, spread: f64, seed: u64) -> AnchorInitView {
    let truth = Vector3::new(6.0, 4.0, 2.0);
    let mut world = stream_rng(seed, Stream::World);
    let mut noise = stream_rng(seed, Stream::Uwb);
    let phase: f64 = world.random_range(0.0..std::f64::consts::TAU);
    let tags: Vec<Vector3<f64>> = (0..n)
        .map(|k| {
            let a = phase + std::f64::consts::TAU * k as f64 / n.max(1) as f64;
            Vector3::new(
                spread * a.cos(),
                spread * a.sin(),
                1.0 + 0.5 * spread * (2.0 * a).sin(),
            ) + gaussian3(&mut world) * 0.02
        })
        .collect();
    let ranges: Vec<f64> = tags
        .iter()
        .map(|t| (truth - t).norm() + range_sigma * gaussian3(&mut noise).x)
        .collect();
    let mut out = AnchorInitView {
        truth: truth.into(),
        tags: tags.iter().map(|t| (*t).into()).collect(),
        ok: false,
        message: String::new(),
        estimate: None,
        sigma: None,
        error: None,
        rms: None,
        iterations: None,
    };
    match solve_anchor_nls(&tags, &ranges, 0.2) {
        Ok(sol) => {
            let mut info = Matrix3::zeros();
            for t in &tags {
                let j = (sol.position - t).normalize();
                info += j * j.transpose();
            }
            let var = range_sigma.max(1e-9).powi(2);
            let sigma = info
                .try_inverse()
                .map(|c| (c * var).diagonal().map(f64::sqrt).into());
            out.ok = true;
            out.message = "converged".into();
            out.estimate = Some(sol.position.into());
            out.sigma = sigma;
            out.error = Some((sol.position - truth).norm());
            out.rms = Some(sol.rms);
            out.iterations = Some(sol.iterations);
        }
        Err(e) => out.message = e.to_string(),
    }
    out
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
}

fn error_json(e: impl std::fmt::Display) -> String {
    serde_json::json!({ "error": e.to_string() }).to_string()
}

#[wasm_bindgen]
pub fn simulate_run(duration: f64, seed: u32, pixel_sigma: f64) -> String {
    match run_view(duration, seed as u64, pixel_sigma) {
        Ok(v) => to_json(&v),
        Err(e) => error_json(e),
    }
}

#[wasm_bindgen]
pub fn observability_spectrum(perturbation_scale: f64, seed: u32) -> String {
    match spectrum_view(perturbation_scale, seed as u64) {
        Ok(v) => to_json(&v),
        Err(e) => error_json(e),
    }
}

#[wasm_bindgen]
pub fn anchor_initialization(ranges: u32, range_sigma: f64, spread: f64, seed: u32) -> String {
    to_json(&anchor_view(ranges as usize, range_sigma, spread, seed as u64))
}
