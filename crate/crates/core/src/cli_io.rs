//! File formats and configuration: IMU CSV, binary lidar records, TUM trajectories,
//! dataset descriptors and the flat `key = value` configuration file.

use crate::evaluation::{ErrorStats, HistogramBin};
use crate::geometry::{Pose, Vec3};
use crate::multi_agent::{LinkParams, SyncConfig};
use crate::odometry::{ImuSample, OdometryConfig};
use crate::pose_graph::PoseGraphConfig;
use crate::sensor_sim::{ImuNoise, LidarKind, LidarModel, SceneKind};
use crate::surfel::LidarPoint;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: time {t} does not increase")]
    NonMonotone { line: usize, t: f64 },
    #[error("truncated lidar record at byte {offset}")]
    Truncated { offset: usize },
    #[error("line {line}: quaternion norm {norm} is not unit")]
    NonUnitQuaternion { line: usize, norm: f64 },
    #[error("line {line}: unknown configuration key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value for `{key}`: {msg}")]
    InvalidValue { line: usize, key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl FormatError {
    fn io(path: &Path, source: io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

/// 17 significant digits: enough for a bit-exact f64 round trip.
fn sig17(x: f64) -> String {
    format!("{x:.16e}")
}

pub const IMU_HEADER: &str = "t,wx,wy,wz,ax,ay,az";

pub fn write_imu_csv<W: Write>(mut w: W, samples: &[ImuSample]) -> io::Result<()> {
    writeln!(w, "{IMU_HEADER}")?;
    for s in samples {
        let v = [s.time, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z];
        writeln!(w, "{}", v.iter().map(|x| sig17(*x)).collect::<Vec<_>>().join(","))?;
    }
    Ok(())
}

fn parse_fields<const N: usize>(line: &str, sep: impl Fn(char) -> bool, lineno: usize) -> Result<[f64; N], FormatError> {
    let parts: Vec<&str> = line.split(sep).filter(|s| !s.is_empty()).collect();
    if parts.len() != N {
        return Err(FormatError::Malformed { line: lineno, msg: format!("expected {N} fields, found {}", parts.len()) });
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.trim().parse().map_err(|_| FormatError::Malformed { line: lineno, msg: format!("not a number: `{}`", p.trim()) })?;
        if !f64::is_finite(*o) {
            return Err(FormatError::Malformed { line: lineno, msg: format!("non-finite value `{}`", p.trim()) });
        }
    }
    Ok(out)
}

pub fn read_imu_csv<R: BufRead>(r: R) -> Result<Vec<ImuSample>, FormatError> {
    let mut out: Vec<ImuSample> = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| FormatError::Malformed { line: lineno, msg: e.to_string() })?;
        let line = line.trim();
        if k == 0 {
            if line.replace(' ', "") != IMU_HEADER {
                return Err(FormatError::Malformed { line: 1, msg: format!("expected header `{IMU_HEADER}`") });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let v = parse_fields::<7>(line, |c| c == ',', lineno)?;
        if out.last().is_some_and(|p| v[0] <= p.time) {
            return Err(FormatError::NonMonotone { line: lineno, t: v[0] });
        }
        out.push(ImuSample { time: v[0], gyro: Vec3::new(v[1], v[2], v[3]), accel: Vec3::new(v[4], v[5], v[6]) });
    }
    Ok(out)
}

pub const LIDAR_RECORD_BYTES: usize = 20;

/// Little-endian `(t f64, x f32, y f32, z f32)` records.
pub fn write_lidar_bin<W: Write>(mut w: W, points: &[LidarPoint]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(points.len() * LIDAR_RECORD_BYTES);
    for p in points {
        buf.extend_from_slice(&p.time.to_le_bytes());
        for c in [p.position.x, p.position.y, p.position.z] {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)
}

pub fn parse_lidar_bin(bytes: &[u8]) -> Result<Vec<LidarPoint>, FormatError> {
    if bytes.len() % LIDAR_RECORD_BYTES != 0 {
        return Err(FormatError::Truncated { offset: bytes.len() - bytes.len() % LIDAR_RECORD_BYTES });
    }
    Ok(bytes
        .chunks_exact(LIDAR_RECORD_BYTES)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes(c[o..o + 4].try_into().expect("4 bytes")) as f64;
            LidarPoint { time: f64::from_le_bytes(c[..8].try_into().expect("8 bytes")), position: Vec3::new(f(8), f(12), f(16)) }
        })
        .collect())
}

pub fn read_lidar_bin<R: Read>(mut r: R) -> Result<Vec<LidarPoint>, FormatError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| FormatError::Malformed { line: 0, msg: e.to_string() })?;
    parse_lidar_bin(&bytes)
}

/// CSV twin of the binary format; coordinates are rounded to f32 like the binary records.
pub fn write_lidar_csv<W: Write>(mut w: W, points: &[LidarPoint]) -> io::Result<()> {
    writeln!(w, "t,x,y,z")?;
    for p in points {
        writeln!(w, "{},{},{},{}", sig17(p.time), p.position.x as f32, p.position.y as f32, p.position.z as f32)?;
    }
    Ok(())
}

pub fn read_lidar_csv<R: BufRead>(r: R) -> Result<Vec<LidarPoint>, FormatError> {
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line.map_err(|e| FormatError::Malformed { line: k + 1, msg: e.to_string() })?;
        if k == 0 || line.trim().is_empty() {
            continue;
        }
        let v = parse_fields::<4>(line.trim(), |c| c == ',', k + 1)?;
        out.push(LidarPoint { time: v[0], position: Vec3::new(v[1] as f32 as f64, v[2] as f32 as f64, v[3] as f32 as f64) });
    }
    Ok(out)
}

pub const QUATERNION_TOL: f64 = 1e-6;

pub fn write_tum<W: Write>(mut w: W, traj: &[(f64, Pose)]) -> io::Result<()> {
    for (t, p) in traj {
        let q = p.quaternion().coords;
        let v = [*t, p.translation.x, p.translation.y, p.translation.z, q.x, q.y, q.z, q.w];
        writeln!(w, "{}", v.iter().map(|x| fmt_short(*x)).collect::<Vec<_>>().join(" "))?;
    }
    Ok(())
}

/// Shortest representation that parses back to the same f64.
fn fmt_short(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else {
        format!("{x}")
    }
}

/// Reads `time tx ty tz qx qy qz qw` lines; `#` starts a comment.
pub fn read_tum<R: BufRead>(r: R) -> Result<Vec<(f64, Pose)>, FormatError> {
    let mut out: Vec<(f64, Pose)> = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| FormatError::Malformed { line: lineno, msg: e.to_string() })?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let v = parse_fields::<8>(body, char::is_whitespace, lineno)?;
        let norm = (v[4] * v[4] + v[5] * v[5] + v[6] * v[6] + v[7] * v[7]).sqrt();
        if (norm - 1.0).abs() > QUATERNION_TOL {
            return Err(FormatError::NonUnitQuaternion { line: lineno, norm });
        }
        if out.last().is_some_and(|(t, _)| v[0] <= *t) {
            return Err(FormatError::NonMonotone { line: lineno, t: v[0] });
        }
        out.push((v[0], Pose::from_quaternion(Vec3::new(v[1], v[2], v[3]), v[4], v[5], v[6], v[7])));
    }
    Ok(out)
}

pub fn write_stats_csv<W: Write>(mut w: W, rows: &[(String, ErrorStats)]) -> io::Result<()> {
    writeln!(w, "metric,mean,rmse,std,max,count")?;
    for (name, s) in rows {
        writeln!(w, "{name},{},{},{},{},{}", fmt_short(s.mean), fmt_short(s.rmse), fmt_short(s.std), fmt_short(s.max), s.count)?;
    }
    Ok(())
}

pub fn write_histogram_csv<W: Write>(mut w: W, bins: &[HistogramBin]) -> io::Result<()> {
    writeln!(w, "bin_low,bin_high,count,fraction")?;
    for b in bins {
        writeln!(w, "{},{},{},{}", fmt_short(b.low), if b.high.is_finite() { fmt_short(b.high) } else { "inf".into() }, b.count, fmt_short(b.fraction))?;
    }
    Ok(())
}

/// Reads the first three vertex properties (which must be `x y z`) of an ASCII PLY.
pub fn read_ply_points<R: BufRead>(r: R) -> Result<Vec<Vec3>, FormatError> {
    let mut lines = r.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String), FormatError> {
        match lines.next() {
            Some((k, Ok(l))) => Ok((k + 1, l)),
            Some((k, Err(e))) => Err(FormatError::Malformed { line: k + 1, msg: e.to_string() }),
            None => Err(FormatError::Malformed { line: 0, msg: format!("unexpected end of file, expected {what}") }),
        }
    };
    let (_, magic) = next("ply")?;
    if magic.trim() != "ply" {
        return Err(FormatError::Malformed { line: 1, msg: "missing `ply` magic".into() });
    }
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let (line, l) = next("end_header")?;
        let f: Vec<&str> = l.split_whitespace().collect();
        match f.as_slice() {
            ["end_header"] => break,
            ["format", fmt, ..] if *fmt != "ascii" => return Err(FormatError::Malformed { line, msg: "only ASCII PLY is supported".into() }),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| FormatError::Malformed { line, msg: "bad vertex count".into() })?),
            ["element", ..] if count.is_some() => break,
            ["property", _, name] if count.is_some() => props.push(name.to_string()),
            _ => {}
        }
    }
    let n = count.ok_or(FormatError::Malformed { line: 0, msg: "no vertex element".into() })?;
    if props.len() < 3 || props[..3] != ["x", "y", "z"] {
        return Err(FormatError::Malformed { line: 0, msg: "vertex properties must start with x y z".into() });
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (line, l) = next("vertex")?;
        let f: Vec<&str> = l.split_whitespace().take(3).collect();
        let v = parse_fields::<3>(&f.join(" "), char::is_whitespace, line)?;
        out.push(Vec3::new(v[0], v[1], v[2]));
    }
    Ok(out)
}

pub fn write_points_ply<W: Write>(mut w: W, points: &[Vec3]) -> io::Result<()> {
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
    writeln!(w, "property double x\nproperty double y\nproperty double z\nend_header")?;
    for p in points {
        writeln!(w, "{} {} {}", fmt_short(p.x), fmt_short(p.y), fmt_short(p.z))?;
    }
    Ok(())
}

/// `x y z` per line; `#` starts a comment.
pub fn read_points_txt<R: BufRead>(r: R) -> Result<Vec<Vec3>, FormatError> {
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line.map_err(|e| FormatError::Malformed { line: k + 1, msg: e.to_string() })?;
        let body = line.split('#').next().unwrap_or("").trim();
        if !body.is_empty() {
            let v = parse_fields::<3>(body, char::is_whitespace, k + 1)?;
            out.push(Vec3::new(v[0], v[1], v[2]));
        }
    }
    Ok(out)
}

pub fn write_points_txt<W: Write>(mut w: W, points: &[Vec3]) -> io::Result<()> {
    for p in points {
        writeln!(w, "{} {} {}", fmt_short(p.x), fmt_short(p.y), fmt_short(p.z))?;
    }
    Ok(())
}

/// Files making up a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetDescriptor {
    pub directory: PathBuf,
    pub imu: PathBuf,
    pub lidar: Vec<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    /// Body←lidar extrinsic.
    pub extrinsic: Option<Pose>,
}

pub const DESCRIPTOR_FILE: &str = "dataset.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    /// Points in the body frame.
    pub lidar: Vec<LidarPoint>,
    pub ground_truth: Option<Vec<(f64, Pose)>>,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, FormatError> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| FormatError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<fs::File>, FormatError> {
    fs::File::open(path).map(BufReader::new).map_err(|e| FormatError::io(path, e))
}

/// Writes `imu.csv`, `lidar.bin`, optional `ground_truth.tum` and the descriptor into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<DatasetDescriptor, FormatError> {
    fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    let desc = DatasetDescriptor {
        directory: dir.to_path_buf(),
        imu: "imu.csv".into(),
        lidar: vec!["lidar.bin".into()],
        ground_truth: data.ground_truth.as_ref().map(|_| "ground_truth.tum".into()),
        extrinsic: None,
    };
    let p = dir.join(&desc.imu);
    write_imu_csv(create(&p)?, &data.imu).map_err(|e| FormatError::io(&p, e))?;
    let p = dir.join(&desc.lidar[0]);
    write_lidar_bin(create(&p)?, &data.lidar).map_err(|e| FormatError::io(&p, e))?;
    if let (Some(gt), Some(name)) = (&data.ground_truth, &desc.ground_truth) {
        let p = dir.join(name);
        write_tum(create(&p)?, gt).map_err(|e| FormatError::io(&p, e))?;
    }
    let p = dir.join(DESCRIPTOR_FILE);
    let mut w = create(&p)?;
    let mut text = format!("imu = {}\nlidar = {}\n", desc.imu.display(), desc.lidar[0].display());
    if let Some(g) = &desc.ground_truth {
        text.push_str(&format!("ground_truth = {}\n", g.display()));
    }
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| FormatError::io(&p, e))?;
    Ok(desc)
}

/// Iterates `key = value` lines, skipping blanks and `#` comments.
fn key_values(text: &str) -> impl Iterator<Item = Result<(usize, String, String), FormatError>> + '_ {
    text.lines().enumerate().filter_map(|(k, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            return None;
        }
        Some(match line.split_once('=') {
            Some((a, b)) => Ok((k + 1, a.trim().to_string(), b.trim().to_string())),
            None => Err(FormatError::Malformed { line: k + 1, msg: "expected `key = value`".into() }),
        })
    })
}

pub fn read_descriptor(dir: &Path) -> Result<DatasetDescriptor, FormatError> {
    let p = dir.join(DESCRIPTOR_FILE);
    let text = fs::read_to_string(&p).map_err(|e| FormatError::io(&p, e))?;
    let mut desc = DatasetDescriptor { directory: dir.to_path_buf(), imu: PathBuf::new(), lidar: Vec::new(), ground_truth: None, extrinsic: None };
    for kv in key_values(&text) {
        let (line, key, value) = kv?;
        match key.as_str() {
            "imu" => desc.imu = value.into(),
            "lidar" => desc.lidar.extend(value.split(',').map(|s| PathBuf::from(s.trim()))),
            "ground_truth" => desc.ground_truth = Some(value.into()),
            "extrinsic" => {
                let v = parse_fields::<7>(&value, char::is_whitespace, line)?;
                desc.extrinsic = Some(Pose::from_quaternion(Vec3::new(v[0], v[1], v[2]), v[3], v[4], v[5], v[6]));
            }
            _ => return Err(FormatError::UnknownKey { line, key }),
        }
    }
    if desc.imu.as_os_str().is_empty() || desc.lidar.is_empty() {
        return Err(FormatError::Invalid("descriptor must name imu and lidar files".into()));
    }
    for f in std::iter::once(&desc.imu).chain(&desc.lidar).chain(&desc.ground_truth) {
        let full = dir.join(f);
        if !full.is_file() {
            return Err(FormatError::io(&full, io::Error::new(io::ErrorKind::NotFound, "referenced file does not exist")));
        }
    }
    Ok(desc)
}

/// Loads a dataset; points are mapped into the body frame when an extrinsic is given.
pub fn read_dataset(dir: &Path) -> Result<Dataset, FormatError> {
    let desc = read_descriptor(dir)?;
    let imu = read_imu_csv(open(&dir.join(&desc.imu))?)?;
    let mut lidar = Vec::new();
    for f in &desc.lidar {
        let p = dir.join(f);
        let pts = if f.extension().is_some_and(|e| e == "csv") { read_lidar_csv(open(&p)?)? } else { read_lidar_bin(open(&p)?)? };
        lidar.extend(pts);
    }
    lidar.sort_by(|a, b| a.time.total_cmp(&b.time));
    if let Some(x) = desc.extrinsic {
        for p in &mut lidar {
            p.position = x.transform_point(&p.position);
        }
    }
    let ground_truth = desc.ground_truth.as_ref().map(|g| read_tum(open(&dir.join(g))?)).transpose()?;
    if let (Some(a), Some(b)) = (imu.first(), lidar.first()) {
        let imu_end = imu.last().expect("nonempty").time;
        if b.time > imu_end || lidar.last().expect("nonempty").time < a.time {
            return Err(FormatError::Invalid("imu and lidar time ranges do not overlap".into()));
        }
    }
    Ok(Dataset { imu, lidar, ground_truth })
}

/// Simulator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub scene: SceneKind,
    /// Run length (s); `None` uses the scene's default trajectory length.
    pub duration: Option<f64>,
    pub imu_rate: f64,
    pub imu: ImuNoise,
    pub lidar: LidarModel,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { scene: SceneKind::TwoRoomLoop, duration: None, imu_rate: 100.0, imu: ImuNoise::none(), lidar: LidarModel::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub link: LinkParams,
    pub round_period: f64,
    pub max_rounds: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { link: LinkParams::default(), round_period: 0.1, max_rounds: 200 }
    }
}

/// Every tunable parameter, loaded from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub odometry: OdometryConfig,
    pub pgo: PoseGraphConfig,
    pub sync: SyncConfig,
    pub net: NetConfig,
    pub sim: SimConfig,
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn list(v: &str) -> Result<Vec<f64>, String> {
    v.split(',').map(|s| num(s.trim())).collect()
}

fn vec3(v: &str) -> Result<Vec3, String> {
    let l = list(v)?;
    (l.len() == 3).then(|| Vec3::new(l[0], l[1], l[2])).ok_or_else(|| "expected three comma-separated numbers".to_string())
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

impl Config {
    /// Sets one parameter; `Ok(false)` means the key is unknown.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool, String> {
        let o = &mut self.odometry;
        let g = &mut self.pgo;
        let s = &mut self.sim;
        match key {
            "odometry.window_length" => o.window_length = num(v)?,
            "odometry.slide" => o.slide = num(v)?,
            "odometry.sample_rate" => o.sample_rate = num(v)?,
            "odometry.outer_iters" => o.outer_iters = num(v)?,
            "odometry.gn_iters" => o.gn_iters = num(v)?,
            "odometry.cauchy_scale" => o.cauchy_scale = num(v)?,
            "odometry.lidar_sigma" => o.lidar_sigma = num(v)?,
            "odometry.gyro_sigma" => o.gyro_sigma = num(v)?,
            "odometry.accel_sigma" => o.accel_sigma = num(v)?,
            "odometry.bias_gyro_sigma" => o.bias_gyro_sigma = num(v)?,
            "odometry.bias_accel_sigma" => o.bias_accel_sigma = num(v)?,
            "odometry.knn" => o.knn = num(v)?,
            "odometry.time_sep_threshold" => o.time_sep_threshold = num(v)?,
            "odometry.gravity" => o.gravity = num(v)?,
            "odometry.imu_dt" => o.imu_dt = num(v)?,
            "odometry.anchor_rot_sigma" => o.anchor_rot_sigma = num(v)?,
            "odometry.anchor_trans_sigma" => o.anchor_trans_sigma = num(v)?,
            "odometry.use_imu_terms" => o.use_imu_terms = boolean(v)?,
            "odometry.degeneracy_ratio" => o.degeneracy_ratio = num(v)?,
            "odometry.submap_period" => o.submap_period = num(v)?,
            "odometry.submap_length" => o.submap_length = num(v)?,
            "odometry.submap_resolutions" => o.submap_resolutions = list(v)?,
            "odometry.odom_edge_rot_sigma" => o.odom_edge_rot_sigma = num(v)?,
            "odometry.odom_edge_trans_sigma" => o.odom_edge_trans_sigma = num(v)?,
            "odometry.init_samples" => o.init_samples = num(v)?,
            "surfel.min_cluster_size" => o.surfel.min_cluster_size = num(v)?,
            "surfel.planarity_threshold" => o.surfel.planarity_threshold = num(v)?,
            "surfel.time_gap" => o.surfel.time_gap = num(v)?,
            "surfel.resolutions" => o.surfel.resolutions = list(v)?,
            "pgo.overlap_threshold" => g.overlap_threshold = num(v)?,
            "pgo.merge_gate" => g.merge_gate = num(v)?,
            "pgo.loop_gate" => g.loop_gate = num(v)?,
            "pgo.candidate_gate" => g.candidate_gate = num(v)?,
            "pgo.candidate_radius" => g.candidate_radius = num(v)?,
            "pgo.max_candidates" => g.max_candidates = num(v)?,
            "pgo.gravity_weight" => g.gravity_weight = num(v)?,
            "pgo.cauchy_scale" => g.cauchy_scale = num(v)?,
            "pgo.max_iters" => g.max_iters = num(v)?,
            "pgo.tolerance" => g.tolerance = num(v)?,
            "pgo.loop_every" => g.loop_every = num(v)?,
            "pgo.yaw_bins" => g.yaw_bins = num(v)?,
            "pgo.min_fitness" => g.min_fitness = num(v)?,
            "pgo.min_fitness_unconnected" => g.min_fitness_unconnected = num(v)?,
            "pgo.max_unconnected" => g.max_unconnected = num(v)?,
            "pgo.icp_max_iters" => g.icp.max_iters = num(v)?,
            "pgo.icp_tolerance" => g.icp.tolerance = num(v)?,
            "pgo.icp_min_correspondences" => g.icp.min_correspondences = num(v)?,
            "pgo.icp_max_distance_factor" => g.icp.max_distance_factor = num(v)?,
            "pgo.icp_normal_agreement" => g.icp.normal_agreement = num(v)?,
            "pgo.icp_sigma_floor" => g.icp.sigma_floor = num(v)?,
            "pgo.icp_inlier_residual" => g.icp.inlier_residual = num(v)?,
            "sync.max_batch" => self.sync.max_batch = num(v)?,
            "sync.bandwidth_per_round" => self.sync.bandwidth_per_round = num(v)?,
            "sync.retry_rounds" => self.sync.retry_rounds = num(v)?,
            "net.latency" => self.net.link.latency = num(v)?,
            "net.drop_probability" => self.net.link.drop_probability = num(v)?,
            "net.bandwidth" => self.net.link.bandwidth = num(v)?,
            "net.round_period" => self.net.round_period = num(v)?,
            "net.max_rounds" => self.net.max_rounds = num(v)?,
            "sim.scene" => s.scene = SceneKind::parse(v).ok_or_else(|| format!("unknown scene `{v}`"))?,
            "sim.duration" => s.duration = Some(num(v)?),
            "sim.imu_rate" => s.imu_rate = num(v)?,
            "sim.gyro_sigma" => s.imu.gyro_sigma = num(v)?,
            "sim.accel_sigma" => s.imu.accel_sigma = num(v)?,
            "sim.gyro_bias" => s.imu.gyro_bias = vec3(v)?,
            "sim.accel_bias" => s.imu.accel_bias = vec3(v)?,
            "sim.lidar_kind" => {
                s.lidar.kind = match v {
                    "flat" => LidarKind::Flat,
                    "spinning" => LidarKind::Spinning,
                    _ => return Err(format!("unknown lidar kind `{v}`")),
                }
            }
            "sim.lidar_rate" => s.lidar.rate_hz = num(v)?,
            "sim.lidar_channels" => s.lidar.channels = num(v)?,
            "sim.lidar_rays" => s.lidar.rays_per_revolution = num(v)?,
            "sim.lidar_fov_deg" => s.lidar.vertical_fov_deg = num(v)?,
            "sim.lidar_spin_rate" => s.lidar.spin_rate_hz = num(v)?,
            "sim.lidar_spin_tilt_deg" => s.lidar.spin_tilt_deg = num(v)?,
            "sim.lidar_max_range" => s.lidar.max_range = num(v)?,
            "sim.lidar_min_range" => s.lidar.min_range = num(v)?,
            "sim.lidar_sigma" => s.lidar.noise_sigma = num(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut c = Self::default();
        for kv in key_values(text) {
            let (line, key, value) = kv?;
            match c.set(&key, &value) {
                Ok(true) => {}
                Ok(false) => return Err(FormatError::UnknownKey { line, key }),
                Err(msg) => return Err(FormatError::InvalidValue { line, key, msg }),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::parse(&fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?)
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        self.odometry.validate().map_err(|e| FormatError::Invalid(e.to_string()))?;
        let g = &self.pgo;
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(g.overlap_threshold) || !unit(g.min_fitness) || !unit(g.min_fitness_unconnected) {
            return Err(FormatError::Invalid("overlap and fitness thresholds must lie in [0, 1]".into()));
        }
        if !(g.merge_gate > 0.0 && g.loop_gate > 0.0 && g.candidate_gate > 0.0 && g.cauchy_scale > 0.0 && g.icp.inlier_residual > 0.0) || g.gravity_weight < 0.0 || g.candidate_radius < 0.0 {
            return Err(FormatError::Invalid("gates, Cauchy scale and ICP inlier residual must be positive, weights non-negative".into()));
        }
        if g.max_iters == 0 || g.yaw_bins == 0 || g.icp.max_iters == 0 {
            return Err(FormatError::Invalid("iteration counts and yaw bins must be positive".into()));
        }
        if self.sync.max_batch == 0 {
            return Err(FormatError::Invalid("sync.max_batch must be positive".into()));
        }
        let l = &self.net.link;
        if !(0.0..=1.0).contains(&l.drop_probability) || l.latency < 0.0 || !(l.bandwidth > 0.0) || !(self.net.round_period > 0.0) {
            return Err(FormatError::Invalid("network parameters out of range".into()));
        }
        let s = &self.sim;
        if s.duration.is_some_and(|d| !(d > 0.0)) || !(s.imu_rate > 0.0) || s.imu.gyro_sigma < 0.0 || s.imu.accel_sigma < 0.0 || s.lidar.noise_sigma < 0.0 {
            return Err(FormatError::Invalid("simulator parameters out of range".into()));
        }
        Ok(())
    }
}
