//! Trajectory and map accuracy metrics: association, RPE, APE, cloud-to-reference distances
//! and MSAC target alignment.

use crate::geometry::{log_so3_unchecked, Mat3, Pose, Vec3};
use crate::spatial::PointIndex;
use nalgebra::SVD;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

/// Time-sorted stamped poses.
pub type Trajectory = [(f64, Pose)];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("timestamps not strictly increasing at index {0}")]
    NonMonotone(usize),
    #[error("no associated pose pairs")]
    EmptyAssociation,
    #[error("need at least {need} pairs, got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("point set is degenerate (collinear)")]
    Degenerate,
    #[error("correspondence lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorStats {
    pub mean: f64,
    pub rmse: f64,
    pub std: f64,
    pub max: f64,
    pub count: usize,
}

impl ErrorStats {
    /// `None` for an empty slice. `std` is the population deviation.
    pub fn from_values(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let rmse = (v.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Self { mean, rmse, std, max, count: v.len() })
    }
}

pub fn check_monotone(traj: &Trajectory) -> Result<(), EvalError> {
    match traj.windows(2).position(|w| w[1].0 <= w[0].0) {
        Some(k) => Err(EvalError::NonMonotone(k + 1)),
        None => Ok(()),
    }
}

/// Pairs each ground-truth stamp with the nearest estimate stamp within `max_dt`.
/// An estimate is used at most once; earlier ground-truth stamps claim first, ties go to the earlier estimate.
pub fn associate(gt: &Trajectory, est: &Trajectory, max_dt: f64) -> Result<Vec<(usize, usize)>, EvalError> {
    check_monotone(gt)?;
    check_monotone(est)?;
    let mut used = vec![false; est.len()];
    let mut out = Vec::new();
    for (i, (t, _)) in gt.iter().enumerate() {
        let k = est.partition_point(|(s, _)| s < t);
        let best = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&j| j < est.len())
            .min_by(|&a, &b| (est[a].0 - t).abs().total_cmp(&(est[b].0 - t).abs()).then(a.cmp(&b)));
        if let Some(j) = best {
            if (est[j].0 - t).abs() <= max_dt && !used[j] {
                used[j] = true;
                out.push((i, j));
            }
        }
    }
    if out.is_empty() {
        return Err(EvalError::EmptyAssociation);
    }
    Ok(out)
}

fn rotation_error(r: &Mat3) -> f64 {
    log_so3_unchecked(r).norm()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpeBucket {
    pub delta: f64,
    pub translation: Option<ErrorStats>,
    pub rotation: Option<ErrorStats>,
    /// Mean translation error over `delta`, in percent.
    pub drift_percent: Option<f64>,
}

/// Index pairs `(i, j)` where `j` is the first index whose path length from `i` reaches `delta`.
pub fn rpe_index_pairs(gt_positions: &[Vec3], delta: f64) -> Vec<(usize, usize)> {
    let mut cum = vec![0.0; gt_positions.len()];
    for k in 1..gt_positions.len() {
        cum[k] = cum[k - 1] + (gt_positions[k] - gt_positions[k - 1]).norm();
    }
    let mut out = Vec::new();
    let mut j = 0;
    for i in 0..cum.len() {
        j = j.max(i + 1);
        while j < cum.len() && cum[j] - cum[i] < delta {
            j += 1;
        }
        if j >= cum.len() {
            break;
        }
        out.push((i, j));
    }
    out
}

/// Relative pose error over path lengths `deltas` on associated pairs.
pub fn rpe(gt: &Trajectory, est: &Trajectory, pairs: &[(usize, usize)], deltas: &[f64]) -> Result<Vec<RpeBucket>, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyAssociation);
    }
    let g: Vec<Pose> = pairs.iter().map(|&(i, _)| gt[i].1).collect();
    let e: Vec<Pose> = pairs.iter().map(|&(_, j)| est[j].1).collect();
    let pos: Vec<Vec3> = g.iter().map(|p| p.translation).collect();
    Ok(deltas
        .iter()
        .map(|&delta| {
            let (mut tr, mut rot) = (Vec::new(), Vec::new());
            for (i, j) in rpe_index_pairs(&pos, delta) {
                let err = g[i].between(&g[j]).inverse().compose(&e[i].between(&e[j]));
                tr.push(err.translation.norm());
                rot.push(rotation_error(&err.rotation));
            }
            let translation = ErrorStats::from_values(&tr);
            RpeBucket { delta, translation, rotation: ErrorStats::from_values(&rot), drift_percent: translation.map(|s| 100.0 * s.mean / delta) }
        })
        .collect())
}

/// Closed-form rigid transform `T` minimising `Σ‖T·src_k − dst_k‖²`.
pub fn umeyama(src: &[Vec3], dst: &[Vec3]) -> Result<Pose, EvalError> {
    if src.len() != dst.len() {
        return Err(EvalError::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(EvalError::TooFewPairs { need: 3, got: src.len() });
    }
    let n = src.len() as f64;
    let (ms, md) = (src.iter().sum::<Vec3>() / n, dst.iter().sum::<Vec3>() / n);
    let mut cov = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - md) * (s - ms).transpose();
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.ok_or(EvalError::Degenerate)?, svd.v_t.ok_or(EvalError::Degenerate)?);
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    Ok(Pose::new(r, md - r * ms))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApeAlign {
    None,
    Rigid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApeResult {
    /// Transform applied to the estimate before comparison.
    pub alignment: Pose,
    pub translation: ErrorStats,
    pub rotation: ErrorStats,
}

/// Absolute pose error on associated pairs, optionally after rigid alignment of the estimate.
pub fn ape(gt: &Trajectory, est: &Trajectory, pairs: &[(usize, usize)], align: ApeAlign) -> Result<ApeResult, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyAssociation);
    }
    let alignment = match align {
        ApeAlign::None => Pose::identity(),
        ApeAlign::Rigid => {
            let src: Vec<Vec3> = pairs.iter().map(|&(_, j)| est[j].1.translation).collect();
            let dst: Vec<Vec3> = pairs.iter().map(|&(i, _)| gt[i].1.translation).collect();
            umeyama(&src, &dst)?
        }
    };
    let (mut tr, mut rot) = (Vec::new(), Vec::new());
    for &(i, j) in pairs {
        let e = alignment.compose(&est[j].1);
        tr.push((e.translation - gt[i].1.translation).norm());
        rot.push(rotation_error(&(gt[i].1.rotation.transpose() * e.rotation)));
    }
    Ok(ApeResult { alignment, translation: ErrorStats::from_values(&tr).expect("nonempty"), rotation: ErrorStats::from_values(&rot).expect("nonempty") })
}

/// Centroid of the points in each occupied voxel, in voxel-key order.
pub fn voxel_downsample(cloud: &[Vec3], voxel: f64) -> Vec<Vec3> {
    if voxel <= 0.0 {
        return cloud.to_vec();
    }
    let mut cells: BTreeMap<[i64; 3], (Vec3, usize)> = BTreeMap::new();
    for p in cloud {
        let key = [(p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64];
        let c = cells.entry(key).or_insert((Vec3::zeros(), 0));
        c.0 += p;
        c.1 += 1;
    }
    cells.into_values().map(|(s, n)| s / n as f64).collect()
}

fn build_tree(cloud: &[Vec3]) -> PointIndex<3> {
    let pts: Vec<[f64; 3]> = cloud.iter().map(|p| [p.x, p.y, p.z]).collect();
    PointIndex::new(&pts)
}

/// Point-to-point ICP of `target` onto `reference`; returns the transform applied to `target`.
pub fn align_clouds(target: &[Vec3], reference: &[Vec3], max_dist: f64, iterations: usize) -> Result<Pose, EvalError> {
    if target.is_empty() || reference.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    let tree = build_tree(reference);
    let mut t = Pose::identity();
    for _ in 0..iterations {
        let (mut src, mut dst) = (Vec::new(), Vec::new());
        for p in target {
            let q = t.transform_point(p);
            let (k, d2) = tree.nearest(&[q.x, q.y, q.z]).expect("nonempty reference");
            if d2 <= max_dist * max_dist {
                src.push(q);
                dst.push(reference[k]);
            }
        }
        let Ok(step) = umeyama(&src, &dst) else { break };
        t = step.compose(&t);
        if step.log_parts().norm() < 1e-9 {
            break;
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    pub fraction: f64,
}

/// Fixed-width bins over `[0, max)` plus one overflow bin `[max, ∞)`.
pub fn histogram(values: &[f64], width: f64, max: f64) -> Vec<HistogramBin> {
    let n = (max / width).round() as usize;
    let mut counts = vec![0usize; n + 1];
    for &v in values {
        let k = if v >= max { n } else { ((v / width).floor().max(0.0) as usize).min(n - 1) };
        counts[k] += 1;
    }
    let total = values.len().max(1) as f64;
    counts
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let low = k as f64 * width;
            let high = if k == n { f64::INFINITY } else { (k + 1) as f64 * width };
            HistogramBin { low, high, count: c, fraction: c as f64 / total }
        })
        .collect()
}

pub const HISTOGRAM_WIDTH: f64 = 0.05;
pub const HISTOGRAM_MAX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MapDistance {
    pub alignment: Pose,
    pub stats: ErrorStats,
    pub histogram: Vec<HistogramBin>,
    pub distances: Vec<f64>,
}

/// Nearest-reference distances of the voxelised target, after optional fine alignment.
pub fn map_distance(target: &[Vec3], reference: &[Vec3], voxel: f64, align: bool) -> Result<MapDistance, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    let down = voxel_downsample(target, voxel);
    if down.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    let alignment = if align { align_clouds(&down, reference, (4.0 * voxel).max(0.5), 50)? } else { Pose::identity() };
    let tree = build_tree(reference);
    let distances: Vec<f64> = down
        .iter()
        .map(|p| {
            let q = alignment.transform_point(p);
            tree.nearest(&[q.x, q.y, q.z]).expect("nonempty reference").1.sqrt()
        })
        .collect();
    Ok(MapDistance {
        alignment,
        stats: ErrorStats::from_values(&distances).expect("nonempty"),
        histogram: histogram(&distances, HISTOGRAM_WIDTH, HISTOGRAM_MAX),
        distances,
    })
}

/// Ratio of the second to the first singular value of the centred points.
fn spread_ratio(pts: &[Vec3]) -> f64 {
    let n = pts.len().max(1) as f64;
    let m = pts.iter().sum::<Vec3>() / n;
    let cov = pts.iter().map(|p| (p - m) * (p - m).transpose()).sum::<Mat3>();
    let mut s: Vec<f64> = cov.symmetric_eigenvalues().iter().map(|v| v.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if s[0] <= 0.0 {
        0.0
    } else {
        s[1] / s[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAlignment {
    /// Transform mapping mapped targets onto surveyed ones.
    pub pose: Pose,
    pub inliers: Vec<usize>,
    pub stats: ErrorStats,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsacParams {
    /// Inlier threshold and truncation of the squared loss (m).
    pub threshold: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for MsacParams {
    fn default() -> Self {
        Self { threshold: 0.2, iterations: 500, seed: 0 }
    }
}

const COLLINEAR_RATIO: f64 = 1e-6;

/// MSAC over 3-point rigid hypotheses with a truncated squared loss, refit on the inliers.
pub fn robust_target_align(mapped: &[Vec3], surveyed: &[Vec3], params: &MsacParams) -> Result<TargetAlignment, EvalError> {
    if mapped.len() != surveyed.len() {
        return Err(EvalError::LengthMismatch(mapped.len(), surveyed.len()));
    }
    let n = mapped.len();
    if n < 3 {
        return Err(EvalError::TooFewPairs { need: 3, got: n });
    }
    if spread_ratio(mapped) < COLLINEAR_RATIO || spread_ratio(surveyed) < COLLINEAR_RATIO {
        return Err(EvalError::Degenerate);
    }
    let tau2 = params.threshold * params.threshold;
    let score = |t: &Pose| -> f64 { mapped.iter().zip(surveyed).map(|(m, s)| (t.transform_point(m) - s).norm_squared().min(tau2)).sum() };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(f64, Pose)> = None;
    let tries = if n == 3 { 1 } else { params.iterations };
    for _ in 0..tries {
        let idx = if n == 3 {
            [0, 1, 2]
        } else {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let mut c = rng.random_range(0..n - 2);
            for lo in [a.min(b), a.max(b)] {
                if c >= lo {
                    c += 1;
                }
            }
            [a, b, c]
        };
        let src: Vec<Vec3> = idx.iter().map(|&k| mapped[k]).collect();
        let dst: Vec<Vec3> = idx.iter().map(|&k| surveyed[k]).collect();
        if spread_ratio(&src) < COLLINEAR_RATIO {
            continue;
        }
        let Ok(t) = umeyama(&src, &dst) else { continue };
        let s = score(&t);
        if best.as_ref().is_none_or(|(b, _)| s < *b) {
            best = Some((s, t));
        }
    }
    let (_, hyp) = best.ok_or(EvalError::Degenerate)?;
    let inliers_of = |t: &Pose| -> Vec<usize> { (0..n).filter(|&k| (t.transform_point(&mapped[k]) - surveyed[k]).norm_squared() < tau2).collect() };
    let mut inliers = inliers_of(&hyp);
    let mut pose = hyp;
    for _ in 0..5 {
        let src: Vec<Vec3> = inliers.iter().map(|&k| mapped[k]).collect();
        if src.len() < 3 || spread_ratio(&src) < COLLINEAR_RATIO {
            return Err(EvalError::Degenerate);
        }
        let dst: Vec<Vec3> = inliers.iter().map(|&k| surveyed[k]).collect();
        pose = umeyama(&src, &dst)?;
        let next = inliers_of(&pose);
        if next == inliers {
            break;
        }
        inliers = next;
    }
    if inliers.len() < 3 {
        return Err(EvalError::Degenerate);
    }
    let res: Vec<f64> = inliers.iter().map(|&k| (pose.transform_point(&mapped[k]) - surveyed[k]).norm()).collect();
    Ok(TargetAlignment { pose, inliers, stats: ErrorStats::from_values(&res).expect("nonempty") })
}

#[cfg(test)]
mod tests;
