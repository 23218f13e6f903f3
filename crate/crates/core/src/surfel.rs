//! Voxel/time clustering of world-frame lidar points into planar surfels.

use crate::geometry::{Mat3, Vec3};
use nalgebra::{SVector, SymmetricEigen};
use std::collections::BTreeMap;
use std::io::{self, Write};
use thiserror::Error;

/// Raw lidar return: per-point timestamp and position in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub time: f64,
    pub position: Vec3,
}

/// A point already placed in the world frame, still carrying its acquisition time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPoint {
    pub time: f64,
    pub position: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surfel {
    pub position: Vec3,
    pub normal: Vec3,
    pub covariance: Mat3,
    /// Ascending eigenvalues of `covariance`.
    pub eigvals: Vec3,
    pub mean_time: f64,
    pub resolution: f64,
    pub point_count: usize,
    pub planarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfelParams {
    pub min_cluster_size: usize,
    pub planarity_threshold: f64,
    pub time_gap: f64,
    pub resolutions: Vec<f64>,
}

impl Default for SurfelParams {
    fn default() -> Self {
        Self { min_cluster_size: 10, planarity_threshold: 0.4, time_gap: 0.2, resolutions: vec![0.25, 0.5, 1.0, 2.0] }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurfelError {
    #[error("negative eigenvalue {0}")]
    NegativeEigenvalue(f64),
}

/// Why a cluster did not become a surfel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rejection {
    TooFewPoints(usize),
    LowPlanarity(f64),
}

/// Points of one voxel sharing a contiguous stretch of timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub voxel: [i64; 3],
    /// Indices into the input slice, sorted by time.
    pub indices: Vec<usize>,
}

pub fn voxel_key(p: &Vec3, resolution: f64) -> [i64; 3] {
    [(p.x / resolution).floor() as i64, (p.y / resolution).floor() as i64, (p.z / resolution).floor() as i64]
}

/// Groups points by voxel, then splits each voxel where consecutive timestamps gap by more
/// than `time_gap`. Clusters below `min_size` are dropped. Output is ordered by voxel then time.
pub fn cluster_points(points: &[StampedPoint], resolution: f64, time_gap: f64, min_size: usize) -> Vec<Cluster> {
    assert!(resolution > 0.0, "resolution must be positive");
    let mut voxels: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        voxels.entry(voxel_key(&p.position, resolution)).or_default().push(i);
    }
    let mut out = Vec::new();
    for (voxel, mut idx) in voxels {
        idx.sort_by(|&a, &b| points[a].time.total_cmp(&points[b].time).then(a.cmp(&b)));
        let mut start = 0;
        for k in 1..=idx.len() {
            let split = k == idx.len() || points[idx[k]].time - points[idx[k - 1]].time > time_gap;
            if split {
                if k - start >= min_size {
                    out.push(Cluster { voxel, indices: idx[start..k].to_vec() });
                }
                start = k;
            }
        }
    }
    out
}

/// `2(λ₂ − λ₁) / (λ₁ + λ₂ + λ₃)`, clamped to `[0, 1]`.
pub fn planarity_score(eigvals: &Vec3) -> Result<f64, SurfelError> {
    for &l in eigvals.iter() {
        if l < -1e-12 {
            return Err(SurfelError::NegativeEigenvalue(l));
        }
    }
    let l = eigvals.map(|v| v.max(0.0));
    let trace = l.sum();
    if trace < 1e-15 {
        return Ok(0.0);
    }
    Ok((2.0 * (l.y - l.x) / trace).clamp(0.0, 1.0))
}

/// Mean, unbiased covariance and mean time of a set of points.
pub fn point_moments(points: impl Iterator<Item = (f64, Vec3)> + Clone) -> (Vec3, Mat3, f64, usize) {
    let mut n = 0usize;
    let mut sum = Vec3::zeros();
    let mut tsum = 0.0;
    for (t, p) in points.clone() {
        n += 1;
        sum += p;
        tsum += t;
    }
    if n == 0 {
        return (Vec3::zeros(), Mat3::zeros(), 0.0, 0);
    }
    let mean = sum / n as f64;
    let mut cov = Mat3::zeros();
    for (_, p) in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    if n > 1 {
        cov /= (n - 1) as f64;
    }
    (mean, cov, tsum / n as f64, n)
}

/// Ascending eigenvalues and matching unit eigenvectors (as columns).
pub fn sorted_eigen(cov: &Mat3) -> (Vec3, Mat3) {
    let eig = SymmetricEigen::new(*cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = Vec3::new(eig.eigenvalues[order[0]], eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    let mut vecs = Mat3::zeros();
    for (k, &o) in order.iter().enumerate() {
        vecs.set_column(k, &eig.eigenvectors.column(o).normalize());
    }
    (vals, vecs)
}

/// Builds a surfel from precomputed moments. The normal is oriented towards `sensor`.
pub fn surfel_from_moments(
    mean: Vec3,
    cov: Mat3,
    mean_time: f64,
    count: usize,
    resolution: f64,
    sensor: &Vec3,
) -> Surfel {
    let (vals, vecs) = sorted_eigen(&cov);
    let vals = vals.map(|v| if v < 0.0 && v > -1e-12 { 0.0 } else { v });
    let mut normal: Vec3 = vecs.column(0).into();
    if normal.dot(&(sensor - mean)) < 0.0 {
        normal = -normal;
    }
    let planarity = planarity_score(&vals.map(|v| v.max(0.0))).unwrap_or(0.0);
    Surfel {
        position: mean,
        normal,
        covariance: cov,
        eigvals: vals,
        mean_time,
        resolution,
        point_count: count,
        planarity,
    }
}

/// Fits an ellipsoid to a cluster and keeps it only if it is planar enough.
pub fn fit_surfel(
    cluster: &[StampedPoint],
    resolution: f64,
    sensor_at: &dyn Fn(f64) -> Vec3,
    params: &SurfelParams,
) -> Result<Surfel, Rejection> {
    let n = cluster.len();
    if n < params.min_cluster_size.max(2) {
        return Err(Rejection::TooFewPoints(n));
    }
    let (mean, cov, mean_time, count) = point_moments(cluster.iter().map(|p| (p.time, p.position)));
    let surfel = surfel_from_moments(mean, cov, mean_time, count, resolution, &sensor_at(mean_time));
    if surfel.planarity < params.planarity_threshold {
        return Err(Rejection::LowPlanarity(surfel.planarity));
    }
    Ok(surfel)
}

/// Surfel together with the indices of the input points it was built from.
#[derive(Debug, Clone)]
pub struct ExtractedSurfel {
    pub surfel: Surfel,
    pub members: Vec<usize>,
}

/// Runs clustering and fitting at every resolution; output is ordered by
/// (resolution, voxel, time).
pub fn extract_multires_with_members(
    points: &[StampedPoint],
    sensor_at: &dyn Fn(f64) -> Vec3,
    params: &SurfelParams,
) -> Vec<ExtractedSurfel> {
    let mut out = Vec::new();
    if points.is_empty() {
        return out;
    }
    let mut scratch = Vec::new();
    for &res in &params.resolutions {
        for cluster in cluster_points(points, res, params.time_gap, params.min_cluster_size) {
            scratch.clear();
            scratch.extend(cluster.indices.iter().map(|&i| points[i]));
            if let Ok(surfel) = fit_surfel(&scratch, res, sensor_at, params) {
                out.push(ExtractedSurfel { surfel, members: cluster.indices });
            }
        }
    }
    out
}

pub fn extract_multires(points: &[StampedPoint], sensor_at: &dyn Fn(f64) -> Vec3, params: &SurfelParams) -> Vec<Surfel> {
    extract_multires_with_members(points, sensor_at, params).into_iter().map(|e| e.surfel).collect()
}

/// Scale applied to `log₂(resolution)` in the descriptor, in meters.
pub const DESCRIPTOR_GAMMA: f64 = 1.0;

/// Flips a normal so that its first nonzero component is positive.
pub fn canonical_normal(n: &Vec3) -> Vec3 {
    for k in 0..3 {
        if n[k] > 0.0 {
            return *n;
        }
        if n[k] < 0.0 {
            return -n;
        }
    }
    *n
}

/// 7-D match descriptor: position, resolution-scaled canonical normal, scaled log-resolution.
pub fn descriptor(s: &Surfel) -> SVector<f64, 7> {
    let n = canonical_normal(&s.normal) * s.resolution;
    SVector::<f64, 7>::from_column_slice(&[
        s.position.x,
        s.position.y,
        s.position.z,
        n.x,
        n.y,
        n.z,
        DESCRIPTOR_GAMMA * s.resolution.log2(),
    ])
}

/// ASCII PLY with per-vertex normal, resolution and planarity.
pub fn write_surfels_ply<W: Write>(mut w: W, surfels: impl ExactSizeIterator<Item = (Vec3, Vec3, f64, f64)>) -> io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", surfels.len())?;
    for name in ["x", "y", "z", "nx", "ny", "nz", "resolution", "planarity"] {
        writeln!(w, "property double {name}")?;
    }
    writeln!(w, "end_header")?;
    for (p, n, res, plan) in surfels {
        writeln!(w, "{} {} {} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z, res, plan)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn origin(_: f64) -> Vec3 {
        Vec3::new(0.0, 0.0, 10.0)
    }

    #[test]
    fn single_contiguous_cluster() {
        let pts: Vec<StampedPoint> = (0..20)
            .map(|i| StampedPoint { time: i as f64 * 0.01, position: Vec3::new(0.1 + 0.01 * i as f64, 0.2, 0.3) })
            .collect();
        let c = cluster_points(&pts, 1.0, 0.2, 10);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].indices.len(), 20);
    }

    #[test]
    fn time_gap_splits_cluster() {
        let pts: Vec<StampedPoint> = (0..20)
            .map(|i| {
                let t = i as f64 * 0.01 + if i >= 10 { 1.0 } else { 0.0 };
                StampedPoint { time: t, position: Vec3::new(0.5, 0.5, 0.01 * i as f64) }
            })
            .collect();
        let c = cluster_points(&pts, 1.0, 0.2, 10);
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|c| c.indices.len() == 10));
    }

    #[test]
    fn empty_input() {
        assert!(cluster_points(&[], 0.5, 0.2, 10).is_empty());
        assert!(extract_multires(&[], &origin, &SurfelParams::default()).is_empty());
    }

    #[test]
    fn planarity_examples() {
        assert_eq!(planarity_score(&Vec3::new(0.0, 1.0, 1.0)).unwrap(), 1.0);
        assert_eq!(planarity_score(&Vec3::new(1.0, 1.0, 1.0)).unwrap(), 0.0);
        assert!((planarity_score(&Vec3::new(0.5, 1.0, 1.5)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(planarity_score(&Vec3::zeros()).unwrap(), 0.0);
        assert!(planarity_score(&Vec3::new(-1e-6, 1.0, 1.0)).is_err());
    }

    proptest! {
        #[test]
        fn planarity_scale_invariant(a in 0.0f64..10.0, b in 0.0f64..10.0, c in 0.0f64..10.0, s in 1e-3f64..1e3) {
            let mut v = [a, b, c];
            v.sort_by(f64::total_cmp);
            let l = Vec3::new(v[0], v[1], v[2]);
            prop_assume!(l.sum() > 1e-9);
            let p = planarity_score(&l).unwrap();
            let q = planarity_score(&(l * s)).unwrap();
            prop_assert!((p - q).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn exact_plane_surfel() {
        let pts: Vec<StampedPoint> = (0..50)
            .map(|i| {
                let (x, y) = ((i % 7) as f64 * 0.1, (i / 7) as f64 * 0.1);
                StampedPoint { time: 0.001 * i as f64, position: Vec3::new(x, y, 0.0) }
            })
            .collect();
        let s = fit_surfel(&pts, 1.0, &origin, &SurfelParams::default()).unwrap();
        assert!((s.normal.z.abs() - 1.0).abs() < 1e-6);
        assert!(s.normal.z > 0.0, "normal faces the sensor");
        assert!(s.eigvals.x <= 1e-12);
        assert!((s.normal.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn isotropic_cloud_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 0.1).unwrap();
        let pts: Vec<StampedPoint> = (0..10_000)
            .map(|i| StampedPoint {
                time: i as f64 * 1e-5,
                position: Vec3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng)),
            })
            .collect();
        let (_, cov, _, _) = point_moments(pts.iter().map(|p| (p.time, p.position)));
        let (vals, _) = sorted_eigen(&cov);
        let score = planarity_score(&vals).unwrap();
        assert!(score < 0.4, "score {score}");
        assert!(matches!(fit_surfel(&pts, 1.0, &origin, &SurfelParams::default()), Err(Rejection::LowPlanarity(_))));
    }

    #[test]
    fn tiny_cluster_rejected() {
        let pts = [
            StampedPoint { time: 0.0, position: Vec3::zeros() },
            StampedPoint { time: 0.1, position: Vec3::x() },
        ];
        let params = SurfelParams { min_cluster_size: 5, ..Default::default() };
        assert_eq!(fit_surfel(&pts, 1.0, &origin, &params), Err(Rejection::TooFewPoints(2)));
    }

    #[test]
    fn clustering_matches_voxel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let pts: Vec<StampedPoint> = (0..10_000)
            .map(|_| StampedPoint {
                time: rng.random_range(0.0..2.0),
                position: Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)),
            })
            .collect();
        let res = 0.7;
        let clusters = cluster_points(&pts, res, 0.05, 4);
        let mut seen = vec![false; pts.len()];
        for c in &clusters {
            let key = voxel_key(&pts[c.indices[0]].position, res);
            for &i in &c.indices {
                // brute-force voxel assignment
                let p = pts[i].position;
                let oracle = [(p.x / res).floor() as i64, (p.y / res).floor() as i64, (p.z / res).floor() as i64];
                assert_eq!(oracle, key);
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        // Every discarded point belongs to a voxel/time run shorter than the minimum size.
        let kept = seen.iter().filter(|s| **s).count();
        let all = cluster_points(&pts, res, 0.05, 1);
        let total: usize = all.iter().map(|c| c.indices.len()).sum();
        assert_eq!(total, pts.len());
        let small: usize = all.iter().filter(|c| c.indices.len() < 4).map(|c| c.indices.len()).sum();
        assert_eq!(kept + small, pts.len());
    }

    #[test]
    fn clustering_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<StampedPoint> = (0..2000)
            .map(|_| StampedPoint {
                time: rng.random_range(0.0..1.0),
                position: Vec3::new(rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), 0.0),
            })
            .collect();
        let mut shuffled: Vec<StampedPoint> = pts.iter().rev().cloned().collect();
        shuffled.rotate_left(517);
        let as_sets = |ps: &[StampedPoint], cs: Vec<Cluster>| -> Vec<Vec<(u64, u64, u64)>> {
            cs.into_iter()
                .map(|c| {
                    let mut v: Vec<_> = c
                        .indices
                        .iter()
                        .map(|&i| (ps[i].time.to_bits(), ps[i].position.x.to_bits(), ps[i].position.y.to_bits()))
                        .collect();
                    v.sort();
                    v
                })
                .collect()
        };
        let a = as_sets(&pts, cluster_points(&pts, 0.5, 0.01, 3));
        let b = as_sets(&shuffled, cluster_points(&shuffled, 0.5, 0.01, 3));
        assert_eq!(a, b);
    }

    fn plane_patch(n: usize) -> Vec<StampedPoint> {
        // tilted plane through (1,1,1) with normal (0.2, 0.1, 1)
        let normal = Vec3::new(0.2, 0.1, 1.0).normalize();
        let u = normal.cross(&Vec3::x()).normalize();
        let v = normal.cross(&u);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        (0..n)
            .map(|i| {
                let a: f64 = rng.random_range(-2.0..2.0);
                let b: f64 = rng.random_range(-2.0..2.0);
                StampedPoint { time: i as f64 * 1e-4, position: Vec3::new(1.0, 1.0, 1.0) + u * a + v * b }
            })
            .collect()
    }

    #[test]
    fn multires_plane_patch() {
        let pts = plane_patch(20_000);
        let params = SurfelParams { resolutions: vec![0.5, 1.0], ..Default::default() };
        let surfels = extract_multires(&pts, &origin, &params);
        let normal = Vec3::new(0.2, 0.1, 1.0).normalize();
        let at = |r: f64| surfels.iter().filter(|s| s.resolution == r).count();
        assert!(at(0.5) > 0 && at(1.0) > 0);
        assert_eq!(surfels.len(), at(0.5) + at(1.0));
        for s in &surfels {
            assert!(s.normal.dot(&normal).abs() > 1.0 - 1e-3);
        }
        // count is the sum of single-resolution runs
        let single: usize = [0.5, 1.0]
            .iter()
            .map(|&r| extract_multires(&pts, &origin, &SurfelParams { resolutions: vec![r], ..Default::default() }).len())
            .sum();
        assert_eq!(single, surfels.len());
    }

    fn surfel_at(p: Vec3, n: Vec3, res: f64) -> Surfel {
        Surfel {
            position: p,
            normal: n,
            covariance: Mat3::zeros(),
            eigvals: Vec3::zeros(),
            mean_time: 0.0,
            resolution: res,
            point_count: 10,
            planarity: 1.0,
        }
    }

    #[test]
    fn descriptor_examples() {
        let d = descriptor(&surfel_at(Vec3::zeros(), Vec3::z(), 1.0));
        assert_eq!(d.as_slice(), &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let s = surfel_at(Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.0, -0.6, 0.8), 0.5);
        assert_eq!(descriptor(&s), descriptor(&s.clone()));
        let flipped = surfel_at(s.position, -s.normal, 0.5);
        assert_eq!(descriptor(&s), descriptor(&flipped));
    }

    #[test]
    fn emitted_surfels_satisfy_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut pts = plane_patch(5000);
        for i in 0..3000 {
            pts.push(StampedPoint {
                time: 0.5 + i as f64 * 1e-4,
                position: Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
            });
        }
        let params = SurfelParams::default();
        for s in extract_multires(&pts, &origin, &params) {
            assert!((s.normal.norm() - 1.0).abs() < 1e-9);
            assert!(s.eigvals.x <= s.eigvals.y && s.eigvals.y <= s.eigvals.z);
            assert!(s.eigvals.x >= -1e-12);
            assert!((0.0..=1.0).contains(&s.planarity) && s.planarity >= params.planarity_threshold);
            assert!(s.point_count >= params.min_cluster_size);
        }
    }

    #[test]
    fn ply_header() {
        let mut buf = Vec::new();
        let items = vec![(Vec3::new(1.0, 2.0, 3.0), Vec3::z(), 0.5, 0.9)];
        write_surfels_ply(&mut buf, items.into_iter()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 1\n"));
        assert!(text.ends_with("1 2 3 0 0 1 0.5 0.9\n"));
    }
}
