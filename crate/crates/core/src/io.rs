//! Configuration, dataset files and result writers.
//!
//! Dataset directory layout:
//!
//! | file              | columns |
//! |-------------------|---------|
//! | `imu.csv`         | `timestamp,gx,gy,gz,ax,ay,az` |
//! | `features.csv`    | `timestamp,feature_id,u,v` (normalized coordinates) |
//! | `ranges.csv`      | `timestamp,tag_id,anchor_id,range_m` |
//! | `anchors.csv`     | `anchor_id,x,y,z` |
//! | `landmarks.csv`   | `landmark_id,x,y,z` |
//! | `groundtruth.csv` | `timestamp,qx,qy,qz,qw,vx,vy,vz,px,py,pz,bgx,bgy,bgz,bax,bay,baz,wx,wy,wz,ax,ay,az` |
//! | `groundtruth.tum` | `timestamp tx ty tz qx qy qz qw` |
//!
//! Every file is sorted by time. Floats are written with the shortest
//! representation that parses back to the same value.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::observability::AuditConfig;
use crate::pipeline::{AnchorEstimate, EstimatePoint, EstimatorKind, FilterConfig};
use crate::propagation::ImuSample;
use crate::range::RangeMeasurement;
use crate::sim::{SimConfig, SimData, TruthSample};
use crate::visual::BearingObservation;

pub const IMU_FILE: &str = "imu.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const RANGES_FILE: &str = "ranges.csv";
pub const ANCHORS_FILE: &str = "anchors.csv";
pub const LANDMARKS_FILE: &str = "landmarks.csv";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.csv";
pub const GROUNDTRUTH_TUM_FILE: &str = "groundtruth.tum";

const IMU_HEADER: &str = "timestamp,gx,gy,gz,ax,ay,az";
const FEATURES_HEADER: &str = "timestamp,feature_id,u,v";
const RANGES_HEADER: &str = "timestamp,tag_id,anchor_id,range_m";
const ANCHORS_HEADER: &str = "anchor_id,x,y,z";
const LANDMARKS_HEADER: &str = "landmark_id,x,y,z";
const GROUNDTRUTH_HEADER: &str =
    "timestamp,qx,qy,qz,qw,vx,vy,vz,px,py,pz,bgx,bgy,bgz,bax,bay,baz,wx,wy,wz,ax,ay,az";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    Run,
    Mc,
    ObsAudit,
}

/// Everything one invocation needs. Parsed from TOML: top-level keys plus
/// `[sim]`, `[filter]` and `[audit]` sections, all optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub estimator: EstimatorKind,
    /// Monte Carlo run count.
    pub runs: usize,
    /// Dataset directory for replay.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub sim: SimConfig,
    pub filter: FilterConfig,
    pub audit: AuditConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: None,
            estimator: EstimatorKind::Cviro,
            runs: 30,
            data: None,
            out: None,
            sim: SimConfig::default(),
            filter: FilterConfig::default(),
            audit: AuditConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.filter.validate()?;
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.mode == Some(Mode::Run) {
            match &self.data {
                Some(d) if d.is_dir() => {}
                Some(d) => {
                    return Err(Error::Config(format!(
                        "data directory {} does not exist",
                        d.display()
                    )))
                }
                None => return Err(Error::Config("run mode needs a data directory".into())),
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// `%.9g`-style formatting.
pub fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').unwrap_or((&sci, "0"));
    let exp: i32 = exp.parse().unwrap_or(0);
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let mant = if mant.contains('.') {
            mant.trim_end_matches('0').trim_end_matches('.')
        } else {
            mant
        };
        format!("{mant}e{exp}")
    }
}

fn quaternion(r: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let s = if q.w < 0.0 { -1.0 } else { 1.0 };
    [s * q.i, s * q.j, s * q.k, s * q.w]
}

fn rotation_from(q: [f64; 4]) -> Result<Matrix3<f64>> {
    let quat = nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]);
    let n = quat.norm();
    if !(n > 0.5 && n < 2.0) {
        return Err(Error::invalid(format!("quaternion norm {n} is not close to 1")));
    }
    Ok(*UnitQuaternion::from_quaternion(quat)
        .to_rotation_matrix()
        .matrix())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_rows<T>(path: &Path, header: &str, rows: &[T], row: impl Fn(&T) -> String) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 64 + header.len() + 1);
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(&row(r));
        out.push('\n');
    }
    write_text(path, &out)
}

fn join(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v}");
    }
    s
}

/// Time ordering a reader enforces.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Order {
    Increasing,
    NonDecreasing,
}

/// Reads a headed CSV file. `parse` receives the numeric fields of a row.
fn read_rows<T>(
    path: &Path,
    header: &str,
    order: Option<Order>,
    parse: impl Fn(&[f64]) -> std::result::Result<T, String>,
) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let expected: Vec<&str> = header.split(',').collect();
    let got = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if got.iter().collect::<Vec<_>>() != expected {
        return Err(parse_err(1, format!("expected header `{header}`")));
    }
    let mut out = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    let mut fields = Vec::with_capacity(expected.len());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != expected.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", expected.len(), rec.len()),
            ));
        }
        fields.clear();
        for (name, f) in expected.iter().zip(rec.iter()) {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(line, format!("field `{name}`: cannot parse `{f}`")))?;
            fields.push(v);
        }
        if let Some(order) = order {
            let t = fields[0];
            if !t.is_finite() {
                return Err(parse_err(line, "timestamp is not finite".into()));
            }
            let regress = match order {
                Order::Increasing => t <= last_t,
                Order::NonDecreasing => t < last_t,
            };
            if regress {
                return Err(parse_err(
                    line,
                    format!("timestamp {t} goes back in time (previous {last_t})"),
                ));
            }
            last_t = t;
        }
        out.push(parse(&fields).map_err(|m| parse_err(line, m))?);
    }
    Ok(out)
}

fn as_id(v: f64, what: &str) -> std::result::Result<usize, String> {
    if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(format!("{what} `{v}` is not a non-negative integer"))
    }
}

pub fn write_imu(samples: &[ImuSample], path: &Path) -> Result<()> {
    write_rows(path, IMU_HEADER, samples, |s| {
        join(&[
            s.timestamp,
            s.gyro.x,
            s.gyro.y,
            s.gyro.z,
            s.accel.x,
            s.accel.y,
            s.accel.z,
        ])
    })
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>> {
    read_rows(path, IMU_HEADER, Some(Order::Increasing), |f| {
        Ok(ImuSample::new(
            f[0],
            Vector3::new(f[1], f[2], f[3]),
            Vector3::new(f[4], f[5], f[6]),
        ))
    })
}

pub fn write_features(obs: &[BearingObservation], path: &Path) -> Result<()> {
    write_rows(path, FEATURES_HEADER, obs, |o| {
        format!("{},{},{},{}", o.timestamp, o.feature_id, o.uv.x, o.uv.y)
    })
}

pub fn read_features(path: &Path) -> Result<Vec<BearingObservation>> {
    read_rows(path, FEATURES_HEADER, Some(Order::NonDecreasing), |f| {
        Ok(BearingObservation {
            timestamp: f[0],
            feature_id: as_id(f[1], "feature_id")?,
            uv: Vector2::new(f[2], f[3]),
        })
    })
}

pub fn write_ranges(ranges: &[RangeMeasurement], path: &Path) -> Result<()> {
    write_rows(path, RANGES_HEADER, ranges, |r| {
        format!("{},{},{},{}", r.timestamp, r.tag_id, r.anchor_id, r.range)
    })
}

pub fn read_ranges(path: &Path) -> Result<Vec<RangeMeasurement>> {
    read_rows(path, RANGES_HEADER, Some(Order::NonDecreasing), |f| {
        if !(f[3] >= 0.0) {
            return Err(format!("range `{}` must be non-negative", f[3]));
        }
        Ok(RangeMeasurement {
            timestamp: f[0],
            tag_id: as_id(f[1], "tag_id")?,
            anchor_id: as_id(f[2], "anchor_id")?,
            range: f[3],
        })
    })
}

fn write_points(path: &Path, header: &str, points: &[(usize, Vector3<f64>)]) -> Result<()> {
    write_rows(path, header, points, |(id, p)| {
        format!("{id},{},{},{}", p.x, p.y, p.z)
    })
}

fn read_points(path: &Path, header: &str) -> Result<Vec<(usize, Vector3<f64>)>> {
    read_rows(path, header, None, |f| {
        Ok((as_id(f[0], "id")?, Vector3::new(f[1], f[2], f[3])))
    })
}

pub fn write_anchors(anchors: &[(usize, Vector3<f64>)], path: &Path) -> Result<()> {
    write_points(path, ANCHORS_HEADER, anchors)
}

pub fn read_anchors(path: &Path) -> Result<Vec<(usize, Vector3<f64>)>> {
    read_points(path, ANCHORS_HEADER)
}

pub fn write_groundtruth(truth: &[TruthSample], path: &Path) -> Result<()> {
    write_rows(path, GROUNDTRUTH_HEADER, truth, |s| {
        let q = quaternion(&s.rotation);
        let mut v = vec![s.timestamp];
        v.extend_from_slice(&q);
        for x in [
            &s.velocity,
            &s.position,
            &s.gyro_bias,
            &s.accel_bias,
            &s.omega_body,
            &s.accel_body,
        ] {
            v.extend_from_slice(x.as_slice());
        }
        join(&v)
    })
}

pub fn read_groundtruth(path: &Path) -> Result<Vec<TruthSample>> {
    read_rows(path, GROUNDTRUTH_HEADER, Some(Order::Increasing), |f| {
        let v3 = |i: usize| Vector3::new(f[i], f[i + 1], f[i + 2]);
        Ok(TruthSample {
            timestamp: f[0],
            rotation: rotation_from([f[1], f[2], f[3], f[4]]).map_err(|e| e.to_string())?,
            velocity: v3(5),
            position: v3(8),
            gyro_bias: v3(11),
            accel_bias: v3(14),
            omega_body: v3(17),
            accel_body: v3(20),
        })
    })
}

/// `timestamp tx ty tz qx qy qz qw`, 9 significant digits.
pub fn tum_line(t: f64, r: &Matrix3<f64>, p: &Vector3<f64>) -> String {
    let q = quaternion(r);
    [t, p.x, p.y, p.z, q[0], q[1], q[2], q[3]]
        .iter()
        .map(|&x| sig9(x))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_tum<'a>(
    poses: impl IntoIterator<Item = (f64, &'a Matrix3<f64>, &'a Vector3<f64>)>,
    path: &Path,
) -> Result<()> {
    write_tum_tagged(poses, None, path)
}

/// As [`write_tum`] with an `# estimator=<name>` comment line first.
pub fn write_tum_tagged<'a>(
    poses: impl IntoIterator<Item = (f64, &'a Matrix3<f64>, &'a Vector3<f64>)>,
    estimator: Option<&str>,
    path: &Path,
) -> Result<()> {
    let mut out = String::new();
    if let Some(name) = estimator {
        let _ = writeln!(out, "# estimator={name}");
    }
    out += "# timestamp tx ty tz qx qy qz qw\n";
    for (t, r, p) in poses {
        out += &tum_line(t, r, p);
        out.push('\n');
    }
    write_text(path, &out)
}

/// Timestamp, rotation and position of one TUM line.
pub type TumPose = (f64, Matrix3<f64>, Vector3<f64>);

/// Reads TUM lines; `#` comments and blank lines are skipped.
pub fn read_tum(path: &Path) -> Result<Vec<TumPose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<TumPose> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            msg,
        };
        let f: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| err(format!("cannot parse `{s}`"))))
            .collect::<Result<_>>()?;
        if f.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", f.len())));
        }
        if out.last().is_some_and(|l| f[0] <= l.0) {
            return Err(err(format!("timestamp {} goes back in time", f[0])));
        }
        let r = rotation_from([f[4], f[5], f[6], f[7]]).map_err(|e| err(e.to_string()))?;
        out.push((f[0], r, Vector3::new(f[1], f[2], f[3])));
    }
    Ok(out)
}

pub fn write_dataset(data: &SimData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_imu(&data.imu, &dir.join(IMU_FILE))?;
    write_features(&data.features, &dir.join(FEATURES_FILE))?;
    write_ranges(&data.ranges, &dir.join(RANGES_FILE))?;
    write_anchors(&data.anchors, &dir.join(ANCHORS_FILE))?;
    let landmarks: Vec<(usize, Vector3<f64>)> = data.landmarks.iter().copied().enumerate().collect();
    write_points(&dir.join(LANDMARKS_FILE), LANDMARKS_HEADER, &landmarks)?;
    write_groundtruth(&data.truth, &dir.join(GROUNDTRUTH_FILE))?;
    write_tum(
        data.truth.iter().map(|s| (s.timestamp, &s.rotation, &s.position)),
        &dir.join(GROUNDTRUTH_TUM_FILE),
    )
}

/// Reads a dataset directory. Ground truth is required because the filter
/// is initialized from its first sample; anchors and landmarks are optional.
pub fn read_dataset(dir: &Path) -> Result<SimData> {
    let imu = read_imu(&dir.join(IMU_FILE))?;
    let features = read_features(&dir.join(FEATURES_FILE))?;
    let ranges_path = dir.join(RANGES_FILE);
    let ranges = if ranges_path.exists() {
        read_ranges(&ranges_path)?
    } else {
        Vec::new()
    };
    let anchors_path = dir.join(ANCHORS_FILE);
    let anchors = if anchors_path.exists() {
        read_anchors(&anchors_path)?
    } else {
        Vec::new()
    };
    let landmarks_path = dir.join(LANDMARKS_FILE);
    let landmarks = if landmarks_path.exists() {
        read_points(&landmarks_path, LANDMARKS_HEADER)?
            .into_iter()
            .map(|(_, p)| p)
            .collect()
    } else {
        Vec::new()
    };
    let truth = read_groundtruth(&dir.join(GROUNDTRUTH_FILE))?;
    if imu.len() < 2 {
        return Err(Error::invalid(format!(
            "{}: fewer than two IMU samples",
            dir.display()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid(format!("{}: empty ground truth", dir.display())));
    }
    let span = imu[imu.len() - 1].timestamp - imu[0].timestamp;
    let imu_rate = (imu.len() - 1) as f64 / span;
    Ok(SimData {
        imu,
        features,
        ranges,
        truth,
        anchors,
        landmarks,
        imu_rate,
    })
}

const STATE_BASE_HEADER: &str = "timestamp,qx,qy,qz,qw,vx,vy,vz,px,py,pz";
const VARIANCE_NAMES: [&str; 15] = [
    "P_thx", "P_thy", "P_thz", "P_vx", "P_vy", "P_vz", "P_px", "P_py", "P_pz", "P_bgx", "P_bgy", "P_bgz",
    "P_bax", "P_bay", "P_baz",
];

/// One row per epoch: pose, velocity, anchor estimates and the diagonal of
/// P over θ, v, p, b_ω, b_a and the anchors (Cartesian). Uninitialized
/// anchors are written as `nan`.
pub fn write_state_csv(points: &[EstimatePoint], anchor_ids: &[usize], path: &Path) -> Result<()> {
    let mut header = String::from(STATE_BASE_HEADER);
    for id in anchor_ids {
        let _ = write!(header, ",u{id}_x,u{id}_y,u{id}_z");
    }
    for n in VARIANCE_NAMES {
        header.push(',');
        header.push_str(n);
    }
    for id in anchor_ids {
        let _ = write!(header, ",P_u{id}x,P_u{id}y,P_u{id}z");
    }
    write_rows(path, &header, points, |pt| {
        let q = quaternion(&pt.rotation);
        let mut v = vec![pt.timestamp];
        v.extend_from_slice(&q);
        v.extend_from_slice(pt.velocity.as_slice());
        v.extend_from_slice(pt.position.as_slice());
        let find = |id: usize| pt.anchors.iter().find(|a| a.0 == id);
        for &id in anchor_ids {
            match find(id) {
                Some(a) => v.extend_from_slice(a.1.as_slice()),
                None => v.extend_from_slice(&[f64::NAN; 3]),
            }
        }
        v.extend_from_slice(&pt.variance);
        for &id in anchor_ids {
            match find(id) {
                Some(a) => v.extend_from_slice(a.2.as_slice()),
                None => v.extend_from_slice(&[f64::NAN; 3]),
            }
        }
        join(&v)
    })
}

/// Final anchor estimates: `anchor_id,x,y,z,` the Cartesian covariance
/// row-major, and the initialization time.
pub fn write_anchor_estimates(anchors: &[AnchorEstimate], path: &Path) -> Result<()> {
    let header = "anchor_id,x,y,z,cxx,cxy,cxz,cyx,cyy,cyz,czx,czy,czz,initialized_at";
    write_rows(path, header, anchors, |a| {
        let mut v: Vec<f64> = a.position.as_slice().to_vec();
        for r in 0..3 {
            for c in 0..3 {
                v.push(a.covariance[(r, c)]);
            }
        }
        v.push(a.initialized_at);
        format!("{},{}", a.anchor_id, join(&v))
    })
}

/// `report.txt` (table), `report.kv` (key = value) and `series.csv`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("report.txt"), &report.to_text())?;
    write_text(&dir.join("report.kv"), &report.to_key_values())?;
    let mut out = String::from("estimator,timestamp,prmse,ormse,pnees,onees\n");
    for s in &report.estimators {
        for k in 0..s.times.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.name,
                s.times[k],
                s.prmse_series[k],
                s.ormse_series[k],
                s.pnees_series[k],
                s.onees_series[k]
            );
        }
    }
    write_text(&dir.join("series.csv"), &out)
}

pub fn write_text_file(text: &str, path: &Path) -> Result<()> {
    write_text(path, text)
}
