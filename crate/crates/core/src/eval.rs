//! Accuracy and consistency metrics and the Monte Carlo harness.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::liegroup::{left_jacobian_inv, so3_log};
use crate::pipeline::{initial_from_truth, run_estimator, EstimatorKind, FilterConfig, RunResult};
use crate::sim::{simulate, SimConfig, SimData};
use crate::state::ErrorParam;

/// Average NEES above this flags an overconfident filter.
pub const NEES_THRESHOLD: f64 = 3.5;
/// Required relative PRMSE reduction of CVIRO over the baseline.
pub const PRMSE_MARGIN: f64 = 0.25;

/// Orientation and position error in the given parameterization, with the
/// truth written as the estimate corrected by the error.
pub fn pose_error(
    param: ErrorParam,
    est_r: &Matrix3<f64>,
    est_p: &Vector3<f64>,
    true_r: &Matrix3<f64>,
    true_p: &Vector3<f64>,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let dr = true_r * est_r.transpose();
    let theta = so3_log(&dr)?;
    let dp = match param {
        ErrorParam::RightInvariant => left_jacobian_inv(&theta) * (true_p - dr * est_p),
        ErrorParam::Vector => true_p - est_p,
    };
    Ok((theta, dp))
}

/// `eᵀ P⁻¹ e`, or `None` when `P` is not positive definite.
pub fn nees(e: &Vector3<f64>, p: &Matrix3<f64>) -> Option<f64> {
    let ch = p.cholesky()?;
    let v = ch.solve(e);
    Some(e.dot(&v))
}

/// Yaw and translation that best map `est` onto `gt` in least squares.
pub fn align_4dof(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<(f64, Vector3<f64>)> {
    if est.len() != gt.len() || est.len() < 2 {
        return Err(Error::Alignment(format!(
            "need at least 2 matched positions, got {}",
            est.len().min(gt.len())
        )));
    }
    let n = est.len() as f64;
    let ce = est.iter().sum::<Vector3<f64>>() / n;
    let cg = gt.iter().sum::<Vector3<f64>>() / n;
    let (mut s, mut c) = (0.0, 0.0);
    for (a, b) in est.iter().zip(gt) {
        let (a, b) = (a - ce, b - cg);
        s += a.x * b.y - a.y * b.x;
        c += a.x * b.x + a.y * b.y;
    }
    let yaw = s.atan2(c);
    let t = cg - yaw_rotation(yaw) * ce;
    Ok((yaw, t))
}

pub fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Pairs each estimate with the nearest ground-truth time within `max_dt`.
pub fn associate(
    est: &[(f64, Vector3<f64>)],
    gt: &[(f64, Vector3<f64>)],
    max_dt: f64,
) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut out = Vec::new();
    for (t, p) in est {
        let i = gt.partition_point(|(tg, _)| tg < t);
        let best = [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter(|&j| j < gt.len())
            .min_by(|&a, &b| (gt[a].0 - t).abs().total_cmp(&(gt[b].0 - t).abs()));
        if let Some(j) = best {
            if (gt[j].0 - t).abs() <= max_dt {
                out.push((*p, gt[j].1));
            }
        }
    }
    out
}

/// Absolute trajectory error after yaw + translation alignment.
pub fn ate(est: &[(f64, Vector3<f64>)], gt: &[(f64, Vector3<f64>)], max_dt: f64) -> Result<f64> {
    let pairs = associate(est, gt, max_dt);
    let (e, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let (yaw, t) = align_4dof(&e, &g)?;
    let r = yaw_rotation(yaw);
    let sq: f64 = e
        .iter()
        .zip(&g)
        .map(|(a, b)| (r * a + t - b).norm_squared())
        .sum();
    Ok((sq / e.len() as f64).sqrt())
}

/// Per-epoch errors of one run against its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub kind: EstimatorKind,
    pub times: Vec<f64>,
    pub position_error_sq: Vec<f64>,
    pub rotation_error_sq: Vec<f64>,
    pub pnees: Vec<Option<f64>>,
    pub onees: Vec<Option<f64>>,
    pub ate: f64,
    pub final_position_error: f64,
    pub anchor_errors: Vec<f64>,
    /// Whether each anchor's 3σ box contains the truth.
    pub anchor_covered: Vec<bool>,
}

pub fn evaluate_run(r: &RunResult, data: &SimData) -> Result<RunMetrics> {
    let param = r.kind.param();
    let n = r.points.len();
    let mut m = RunMetrics {
        kind: r.kind,
        times: Vec::with_capacity(n),
        position_error_sq: Vec::with_capacity(n),
        rotation_error_sq: Vec::with_capacity(n),
        pnees: Vec::with_capacity(n),
        onees: Vec::with_capacity(n),
        ate: 0.0,
        final_position_error: 0.0,
        anchor_errors: Vec::new(),
        anchor_covered: Vec::new(),
    };
    let mut est = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    for p in &r.points {
        let t = data.truth_at(p.timestamp);
        let (th, dp) = pose_error(param, &p.rotation, &p.position, &t.rotation, &t.position)?;
        m.times.push(p.timestamp);
        m.position_error_sq.push((t.position - p.position).norm_squared());
        m.rotation_error_sq.push(th.norm_squared());
        m.pnees.push(nees(&dp, &p.cov_position));
        m.onees.push(nees(&th, &p.cov_rotation));
        est.push((p.timestamp, p.position));
        gt.push((t.timestamp, t.position));
    }
    m.final_position_error = m.position_error_sq.last().map_or(0.0, |e| e.sqrt());
    m.ate = ate(&est, &gt, 0.5 / data.imu_rate)?;
    for a in &r.anchors {
        if let Some((_, truth)) = data.anchors.iter().find(|(id, _)| *id == a.anchor_id) {
            let e = truth - a.position;
            m.anchor_errors.push(e.norm());
            m.anchor_covered
                .push((0..3).all(|i| e[i].abs() <= 3.0 * a.covariance[(i, i)].max(0.0).sqrt()));
        }
    }
    Ok(m)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Monte Carlo aggregate of one estimator.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub name: String,
    pub run_count: usize,
    pub times: Vec<f64>,
    pub prmse_series: Vec<f64>,
    pub ormse_series: Vec<f64>,
    pub pnees_series: Vec<f64>,
    pub onees_series: Vec<f64>,
    pub prmse: f64,
    pub ormse: f64,
    pub pnees: f64,
    pub onees: f64,
    pub ate: f64,
    pub final_position_error: f64,
    /// Mean final anchor error; NaN without anchors.
    pub anchor_error: f64,
    /// Fraction of anchors whose 3σ box covers the truth; NaN without anchors.
    pub anchor_coverage: f64,
    pub nees_skipped: usize,
}

/// RMSE is averaged over runs at each epoch, then over time.
pub fn summarize(runs: &[RunMetrics]) -> Result<EstimatorSummary> {
    let first = runs
        .first()
        .ok_or_else(|| Error::invalid("no runs to summarize"))?;
    let len = runs.iter().map(|r| r.times.len()).min().unwrap_or(0);
    let nr = runs.len() as f64;
    let mut s = EstimatorSummary {
        name: first.kind.name().to_string(),
        run_count: runs.len(),
        times: first.times[..len].to_vec(),
        prmse_series: Vec::with_capacity(len),
        ormse_series: Vec::with_capacity(len),
        pnees_series: Vec::with_capacity(len),
        onees_series: Vec::with_capacity(len),
        prmse: 0.0,
        ormse: 0.0,
        pnees: 0.0,
        onees: 0.0,
        ate: mean(runs.iter().map(|r| r.ate)),
        final_position_error: mean(runs.iter().map(|r| r.final_position_error)),
        anchor_error: mean(runs.iter().flat_map(|r| r.anchor_errors.iter().copied())),
        anchor_coverage: mean(
            runs.iter()
                .flat_map(|r| r.anchor_covered.iter().map(|&c| if c { 1.0 } else { 0.0 })),
        ),
        nees_skipped: 0,
    };
    for k in 0..len {
        s.prmse_series
            .push((runs.iter().map(|r| r.position_error_sq[k]).sum::<f64>() / nr).sqrt());
        s.ormse_series
            .push((runs.iter().map(|r| r.rotation_error_sq[k]).sum::<f64>() / nr).sqrt());
        for (series, pick) in [(&mut s.pnees_series, 0usize), (&mut s.onees_series, 1usize)] {
            let vals: Vec<f64> = runs
                .iter()
                .filter_map(|r| if pick == 0 { r.pnees[k] } else { r.onees[k] })
                .collect();
            s.nees_skipped += runs.len() - vals.len();
            series.push(mean(vals.into_iter()));
        }
    }
    s.prmse = mean(s.prmse_series.iter().copied());
    s.ormse = mean(s.ormse_series.iter().copied());
    s.pnees = mean(s.pnees_series.iter().copied().filter(|x| x.is_finite()));
    s.onees = mean(s.onees_series.iter().copied().filter(|x| x.is_finite()));
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub run_count: usize,
    pub seeds: Vec<u64>,
    pub estimators: Vec<EstimatorSummary>,
}

impl EvalReport {
    pub fn get(&self, kind: EstimatorKind) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.name == kind.name())
    }

    /// CVIRO average PNEES and ONEES both below the threshold.
    pub fn cviro_consistent(&self) -> Option<bool> {
        self.get(EstimatorKind::Cviro)
            .map(|s| s.pnees < NEES_THRESHOLD && s.onees < NEES_THRESHOLD)
    }

    /// Baseline ONEES above the threshold.
    pub fn baseline_inconsistent(&self) -> Option<bool> {
        self.get(EstimatorKind::VioBaseline)
            .map(|s| s.onees > NEES_THRESHOLD)
    }

    /// CVIRO PRMSE at least the margin below the baseline's.
    pub fn accuracy_ordering(&self) -> Option<bool> {
        let c = self.get(EstimatorKind::Cviro)?;
        let b = self.get(EstimatorKind::VioBaseline)?;
        Some(c.prmse <= (1.0 - PRMSE_MARGIN) * b.prmse)
    }

    pub fn flags(&self) -> Vec<(&'static str, Option<bool>)> {
        vec![
            ("cviro_consistent", self.cviro_consistent()),
            ("baseline_inconsistent", self.baseline_inconsistent()),
            ("accuracy_ordering", self.accuracy_ordering()),
        ]
    }

    /// Tabular human-readable report.
    pub fn to_text(&self) -> String {
        let mut out = format!("runs: {}\n\n", self.run_count);
        out += &format!(
            "{:<14}{:>10}{:>12}{:>10}{:>10}{:>10}{:>12}{:>10}\n",
            "estimator", "PRMSE[m]", "ORMSE[deg]", "PNEES", "ONEES", "ATE[m]", "anchor[m]", "cover3σ"
        );
        for s in &self.estimators {
            out += &format!(
                "{:<14}{:>10.4}{:>12.4}{:>10.3}{:>10.3}{:>10.4}{:>12.4}{:>10.3}\n",
                s.name,
                s.prmse,
                s.ormse.to_degrees(),
                s.pnees,
                s.onees,
                s.ate,
                s.anchor_error,
                s.anchor_coverage
            );
        }
        out += "\n";
        for (name, flag) in self.flags() {
            if let Some(f) = flag {
                out += &format!("{name}: {}\n", if f { "PASS" } else { "FAIL" });
            }
        }
        out
    }

    /// `key = value` lines for machine consumption.
    pub fn to_key_values(&self) -> String {
        let mut out = format!("run_count = {}\n", self.run_count);
        for s in &self.estimators {
            let k = s.name.replace('-', "_");
            for (field, v) in [
                ("prmse", s.prmse),
                ("ormse", s.ormse),
                ("pnees", s.pnees),
                ("onees", s.onees),
                ("ate", s.ate),
                ("final_position_error", s.final_position_error),
                ("anchor_error", s.anchor_error),
                ("anchor_coverage", s.anchor_coverage),
            ] {
                out += &format!("{k}.{field} = {v:.9e}\n");
            }
            out += &format!("{k}.nees_skipped = {}\n", s.nees_skipped);
        }
        for (name, flag) in self.flags() {
            if let Some(f) = flag {
                out += &format!("{name} = {f}\n");
            }
        }
        out
    }
}

/// Seed of run `i`.
pub fn run_seed(base: u64, i: usize) -> u64 {
    base.wrapping_add(i as u64)
}

/// Simulates one dataset and evaluates every estimator on it.
pub fn single_run(
    sim: &SimConfig,
    filter: &FilterConfig,
    kinds: &[EstimatorKind],
    seed: u64,
) -> Result<Vec<RunMetrics>> {
    let cfg = SimConfig { seed, ..sim.clone() };
    let data = simulate(&cfg)?;
    let init = initial_from_truth(&data)?;
    kinds
        .iter()
        .map(|&k| {
            let r = run_estimator(k, &data, &init, filter, &cfg.camera, &cfg.uwb, seed)?;
            evaluate_run(&r, &data)
        })
        .collect()
}

/// Runs `n_runs` seeds (`sim.seed`, `sim.seed + 1`, ...) and aggregates.
pub fn monte_carlo(
    sim: &SimConfig,
    filter: &FilterConfig,
    n_runs: usize,
    kinds: &[EstimatorKind],
) -> Result<EvalReport> {
    if n_runs == 0 {
        return Err(Error::Config("Monte Carlo needs at least one run".into()));
    }
    sim.validate()?;
    filter.validate()?;
    let seeds: Vec<u64> = (0..n_runs).map(|i| run_seed(sim.seed, i)).collect();
    let job = |seed: &u64| single_run(sim, filter, kinds, *seed);
    #[cfg(feature = "parallel")]
    let results: Vec<Result<Vec<RunMetrics>>> = {
        use rayon::prelude::*;
        seeds.par_iter().map(job).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<Vec<RunMetrics>>> = seeds.iter().map(job).collect();
    let per_seed = results.into_iter().collect::<Result<Vec<_>>>()?;
    let estimators = (0..kinds.len())
        .map(|j| {
            let runs: Vec<RunMetrics> = per_seed.iter().map(|r| r[j].clone()).collect();
            summarize(&runs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        run_count: n_runs,
        seeds,
        estimators,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::exp_so3;
    use crate::state::{error_vector, FilterState, ImuBias};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn nees_unit_cases() {
        let p = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 0.25));
        assert_eq!(nees(&Vector3::zeros(), &p), Some(0.0));
        assert!((nees(&Vector3::new(2.0, 0.0, 0.0), &p).unwrap() - 1.0).abs() < 1e-15);
        assert!((nees(&Vector3::new(0.0, 0.0, 0.5), &p).unwrap() - 1.0).abs() < 1e-15);
        assert!(nees(&Vector3::x(), &Matrix3::zeros()).is_none());
    }

    #[test]
    fn consistent_toy_filter_averages_three() {
        // Random-walk position observed directly: the Kalman filter is exact.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, r) = (0.01_f64, 0.04_f64);
        let mut x = Vector3::zeros();
        let mut xh = Vector3::zeros();
        let mut p = 1.0;
        let mut acc = 0.0;
        let steps = 10_000;
        for _ in 0..steps {
            x += Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)) * q.sqrt();
            p += q;
            let z = x + Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)) * r.sqrt();
            let k = p / (p + r);
            xh += (z - xh) * k;
            p *= 1.0 - k;
            acc += nees(&(x - xh), &(Matrix3::identity() * p)).unwrap();
        }
        let avg = acc / steps as f64;
        assert!((2.8..=3.2).contains(&avg), "{avg}");
    }

    #[test]
    fn pose_error_matches_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for param in [ErrorParam::RightInvariant, ErrorParam::Vector] {
            let mk = |r: Matrix3<f64>, p: Vector3<f64>| {
                FilterState::new(
                    param,
                    0.0,
                    r,
                    Vector3::zeros(),
                    p,
                    ImuBias::default(),
                    DMatrix::identity(15, 15),
                    2,
                )
                .unwrap()
            };
            let r0 = exp_so3(&Vector3::new(0.3, -0.2, 1.0));
            let p0 = Vector3::new(1.0, 2.0, -3.0);
            let r1 = exp_so3(&Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3))) * r0;
            let p1 = p0 + Vector3::new(0.3, 0.1, -0.2);
            let e = error_vector(&mk(r0, p0), &mk(r1, p1)).unwrap();
            let (th, dp) = pose_error(param, &r0, &p0, &r1, &p1).unwrap();
            assert!((th - e.fixed_rows::<3>(0)).norm() < 1e-12);
            assert!((dp - e.fixed_rows::<3>(6)).norm() < 1e-12);
        }
    }

    fn traj(n: usize) -> Vec<(f64, Vector3<f64>)> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.1;
                (t, Vector3::new(t.sin() * 3.0, (0.7 * t).cos() * 2.0, 0.3 * t))
            })
            .collect()
    }

    #[test]
    fn ate_identical_and_shifted() {
        let gt = traj(100);
        assert!(ate(&gt, &gt, 0.01).unwrap() < 1e-12);
        let shifted: Vec<_> = gt.iter().map(|(t, p)| (*t, p + Vector3::x())).collect();
        assert!(ate(&shifted, &gt, 0.01).unwrap() < 1e-12);
        let r = yaw_rotation(0.7);
        let moved: Vec<_> = gt
            .iter()
            .map(|(t, p)| (*t, r * p + Vector3::new(1.0, -2.0, 0.5)))
            .collect();
        assert!(ate(&moved, &gt, 0.01).unwrap() < 1e-12);
    }

    #[test]
    fn ate_keeps_unaligned_errors() {
        let gt = traj(100);
        // a roll is not removed by yaw + translation alignment
        let r = exp_so3(&Vector3::new(0.2, 0.0, 0.0));
        let rolled: Vec<_> = gt.iter().map(|(t, p)| (*t, r * p)).collect();
        assert!(ate(&rolled, &gt, 0.01).unwrap() > 0.05);
    }

    #[test]
    fn ate_needs_two_matches() {
        let gt = traj(10);
        let far: Vec<_> = gt.iter().map(|(t, p)| (t + 100.0, *p)).collect();
        assert!(matches!(ate(&far, &gt, 0.01), Err(Error::Alignment(_))));
    }

    fn metrics(kind: EstimatorKind, pe: f64, pn: f64) -> RunMetrics {
        RunMetrics {
            kind,
            times: vec![0.0, 0.1],
            position_error_sq: vec![pe * pe, pe * pe],
            rotation_error_sq: vec![0.0, 0.0],
            pnees: vec![Some(pn), None],
            onees: vec![Some(1.0), Some(2.0)],
            ate: 0.0,
            final_position_error: pe,
            anchor_errors: vec![],
            anchor_covered: vec![],
        }
    }

    #[test]
    fn summary_averages_runs_then_time() {
        let runs = vec![
            metrics(EstimatorKind::Cviro, 0.3, 2.0),
            metrics(EstimatorKind::Cviro, 0.4, 4.0),
        ];
        let s = summarize(&runs).unwrap();
        assert_eq!(s.run_count, 2);
        assert!((s.prmse - (0.125f64).sqrt()).abs() < 1e-15);
        assert_eq!(s.pnees_series[0], 3.0);
        assert!(s.pnees_series[1].is_nan());
        assert_eq!(s.pnees, 3.0);
        assert_eq!(s.onees, 1.5);
        assert_eq!(s.nees_skipped, 2);
        assert!(s.anchor_error.is_nan());
    }

    #[test]
    fn report_flags() {
        let c = summarize(&[metrics(EstimatorKind::Cviro, 0.1, 2.0)]).unwrap();
        let b = summarize(&[metrics(EstimatorKind::VioBaseline, 0.2, 2.0)]).unwrap();
        let rep = EvalReport {
            run_count: 1,
            seeds: vec![1],
            estimators: vec![c, b],
        };
        assert_eq!(rep.cviro_consistent(), Some(true));
        assert_eq!(rep.baseline_inconsistent(), Some(false));
        assert_eq!(rep.accuracy_ordering(), Some(true));
        assert!(rep.to_key_values().contains("run_count = 1\n"));
        assert!(rep.to_text().contains("cviro_consistent: PASS"));
    }

    #[test]
    fn small_monte_carlo() {
        let sim = SimConfig {
            duration: 4.0,
            ..SimConfig::default()
        };
        let rep = monte_carlo(
            &sim,
            &FilterConfig::default(),
            2,
            &[EstimatorKind::Cviro, EstimatorKind::VioBaseline],
        )
        .unwrap();
        assert_eq!(rep.run_count, 2);
        assert_eq!(rep.seeds, vec![1, 2]);
        for s in &rep.estimators {
            assert!(s.prmse.is_finite() && s.pnees.is_finite());
            assert_eq!(s.prmse_series.len(), s.times.len());
        }
    }
}
