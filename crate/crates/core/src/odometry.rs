//! Sliding-window continuous-time lidar-inertial odometry.
//!
//! Each window holds IMU-rate poses, a sparse set of equidistant sample poses and the
//! surfels extracted from the window's points. An outer iteration matches surfels across
//! time, solves for per-sample corrections, spreads them to the IMU poses through a cubic
//! B-spline of the corrected samples and re-places every point.

use crate::geometry::{exp_so3, log_so3_unchecked, orthonormalize, GeometryError, Mat3, Pose, PoseSpline, Vec3};
use crate::pose_costs::{
    imu_residuals, interp_correction, surfel_match_residual, CorrectionPose, CostError, ImuBias,
    ImuWeights, ImuWindow, MatchSide, Residual, Var,
};
use crate::spatial::PointIndex;
use crate::pose_graph::{MapSurfel, Submap, SubmapId};
use crate::surfel::{
    descriptor, extract_multires_with_members, point_moments, sorted_eigen, surfel_from_moments, LidarPoint, StampedPoint,
    Surfel, SurfelParams,
};
use nalgebra::{DMatrix, DVector, Matrix6, SymmetricEigen};
use std::collections::BTreeMap;
use std::io::{self, Write};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub time: f64,
    /// Body-frame angular rate (rad/s).
    pub gyro: Vec3,
    /// Body-frame specific force (m/s²).
    pub accel: Vec3,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdometryError {
    #[error("IMU gap of {gap:.4} s after t = {after}")]
    ImuGap { after: f64, gap: f64 },
    #[error("IMU timestamps not strictly increasing at t = {0}")]
    NonMonotonic(f64),
    #[error("time {0} not bracketed by IMU timestamps")]
    Unbracketed(f64),
    #[error("not enough IMU data: {0}")]
    NotEnoughImu(String),
    #[error("invalid odometry configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryConfig {
    pub window_length: f64,
    pub slide: f64,
    /// Sample poses per second.
    pub sample_rate: f64,
    pub outer_iters: usize,
    pub gn_iters: usize,
    /// Cauchy scale as a multiple of `lidar_sigma`.
    pub cauchy_scale: f64,
    pub lidar_sigma: f64,
    pub gyro_sigma: f64,
    pub accel_sigma: f64,
    pub bias_gyro_sigma: f64,
    pub bias_accel_sigma: f64,
    pub knn: usize,
    pub time_sep_threshold: f64,
    pub gravity: f64,
    pub imu_dt: f64,
    /// Prior holding the first sample of each window in place (rad, m).
    pub anchor_rot_sigma: f64,
    pub anchor_trans_sigma: f64,
    pub use_imu_terms: bool,
    /// Eigenvalue ratio below which the normal matrix is reported as degenerate.
    pub degeneracy_ratio: f64,
    pub surfel: SurfelParams,
    pub submap_period: f64,
    pub submap_length: f64,
    pub submap_resolutions: Vec<f64>,
    /// Fallback odometry-edge standard deviations (rad, m).
    pub odom_edge_rot_sigma: f64,
    pub odom_edge_trans_sigma: f64,
    pub init_samples: usize,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            window_length: 2.0,
            slide: 0.5,
            sample_rate: 10.0,
            outer_iters: 4,
            gn_iters: 2,
            cauchy_scale: 3.0,
            lidar_sigma: 0.02,
            gyro_sigma: 0.01,
            accel_sigma: 0.05,
            bias_gyro_sigma: 1e-3,
            bias_accel_sigma: 1e-2,
            knn: 3,
            time_sep_threshold: 0.1,
            gravity: 9.80665,
            imu_dt: 0.01,
            anchor_rot_sigma: 1e-3,
            anchor_trans_sigma: 1e-3,
            use_imu_terms: true,
            degeneracy_ratio: 1e-9,
            surfel: SurfelParams::default(),
            submap_period: 5.0,
            submap_length: 6.0,
            submap_resolutions: vec![0.25, 0.5, 1.0],
            odom_edge_rot_sigma: 0.01,
            odom_edge_trans_sigma: 0.05,
            init_samples: 20,
        }
    }
}

impl OdometryConfig {
    pub fn validate(&self) -> Result<(), OdometryError> {
        let positive = [
            ("window_length", self.window_length),
            ("slide", self.slide),
            ("sample_rate", self.sample_rate),
            ("cauchy_scale", self.cauchy_scale),
            ("lidar_sigma", self.lidar_sigma),
            ("gyro_sigma", self.gyro_sigma),
            ("accel_sigma", self.accel_sigma),
            ("bias_gyro_sigma", self.bias_gyro_sigma),
            ("bias_accel_sigma", self.bias_accel_sigma),
            ("time_sep_threshold", self.time_sep_threshold),
            ("gravity", self.gravity),
            ("imu_dt", self.imu_dt),
            ("anchor_rot_sigma", self.anchor_rot_sigma),
            ("anchor_trans_sigma", self.anchor_trans_sigma),
            ("submap_period", self.submap_period),
            ("submap_length", self.submap_length),
            ("odom_edge_rot_sigma", self.odom_edge_rot_sigma),
            ("odom_edge_trans_sigma", self.odom_edge_trans_sigma),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(OdometryError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.slide >= self.window_length {
            return Err(OdometryError::Config("slide must be shorter than window_length".into()));
        }
        if self.outer_iters == 0 || self.gn_iters == 0 || self.knn == 0 || self.init_samples == 0 {
            return Err(OdometryError::Config("iteration counts, knn and init_samples must be positive".into()));
        }
        if self.sample_count() < 4 {
            return Err(OdometryError::Config("window must hold at least 4 sample poses".into()));
        }
        if self.surfel.resolutions.is_empty() || self.surfel.resolutions.iter().any(|r| !(*r > 0.0)) {
            return Err(OdometryError::Config("surfel resolutions must be positive".into()));
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        (self.window_length * self.sample_rate).round() as usize + 1
    }

    pub fn gravity_vector(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, -self.gravity)
    }

    pub fn imu_weights(&self) -> Result<ImuWeights, CostError> {
        let d = |s: f64| Mat3::identity() * s * s;
        ImuWeights::from_covariances(&d(self.gyro_sigma), &d(self.accel_sigma), &d(self.bias_gyro_sigma), &d(self.bias_accel_sigma))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasState {
    pub estimate: ImuBias,
    pub cov_gyro: Mat3,
    pub cov_accel: Mat3,
}

impl BiasState {
    pub fn new(config: &OdometryConfig) -> Self {
        Self {
            estimate: ImuBias::default(),
            cov_gyro: Mat3::identity() * config.bias_gyro_sigma.powi(2),
            cov_accel: Mat3::identity() * config.bias_accel_sigma.powi(2),
        }
    }
}

/// A lidar return tied to the IMU interval it falls in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRecord {
    pub time: f64,
    pub body: Vec3,
    /// Global index of the IMU sample at or before `time`.
    pub imu_index: usize,
    pub alpha: f64,
    pub world: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSurfel {
    pub surfel: Surfel,
    /// Global point indices.
    pub members: Vec<usize>,
    /// Trajectory position at the surfel's mean time.
    pub pivot: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowState {
    pub imu: Vec<ImuSample>,
    pub imu_poses: Vec<Pose>,
    /// Global index of `imu[0]`.
    pub imu_base: usize,
    pub sample_times: Vec<f64>,
    pub sample_poses: Vec<Pose>,
    pub points: Vec<PointRecord>,
    /// Global index of `points[0]`.
    pub point_base: usize,
    pub surfels: Vec<WindowSurfel>,
    pub bias: BiasState,
    pub bias_prior: ImuBias,
    pub gravity: Vec3,
}

/// `(R_a·exp(α·log(R_aᵀR_b)), (1−α)t_a + αt_b)`
pub fn interpolate_pose(a: &Pose, b: &Pose, alpha: f64) -> Pose {
    let phi = log_so3_unchecked(&(a.rotation.transpose() * b.rotation));
    Pose::new(a.rotation * exp_so3(&(phi * alpha)), a.translation * (1.0 - alpha) + b.translation * alpha)
}

/// Index `k` and fraction `α` with `times[k] ≤ t ≤ times[k+1]`.
pub fn bracket(times: &[f64], t: f64) -> Result<(usize, f64), OdometryError> {
    let n = times.len();
    if n == 0 {
        return Err(OdometryError::Unbracketed(t));
    }
    let tol = 1e-9;
    if t < times[0] - tol || t > times[n - 1] + tol {
        return Err(OdometryError::Unbracketed(t));
    }
    if n == 1 {
        return Ok((0, 0.0));
    }
    let k = times.partition_point(|&x| x <= t).saturating_sub(1).min(n - 2);
    let alpha = ((t - times[k]) / (times[k + 1] - times[k])).clamp(0.0, 1.0);
    Ok((k, alpha))
}

/// Poses at arbitrary times by interpolating the two closest IMU poses.
pub fn interpolate_point_poses(times: &[f64], imu_times: &[f64], imu_poses: &[Pose]) -> Result<Vec<Pose>, OdometryError> {
    times
        .iter()
        .map(|&t| {
            let (k, a) = bracket(imu_times, t)?;
            Ok(if a == 0.0 || k + 1 >= imu_poses.len() { imu_poses[k] } else { interpolate_pose(&imu_poses[k], &imu_poses[k + 1], a) })
        })
        .collect()
}

/// Adds one reflected control pose at each end so the cubic support spans every sample.
/// Reflection keeps a constant left correction constant on the padded curve.
fn padded_controls(times: &[f64], poses: &[Pose]) -> (Vec<f64>, Vec<Pose>) {
    let n = times.len();
    let reflect = |a: &Pose, b: &Pose| {
        Pose::new(orthonormalize(&(a.rotation * b.rotation.transpose() * a.rotation)), a.translation * 2.0 - b.translation)
    };
    let mut knots = Vec::with_capacity(n + 2);
    knots.push(2.0 * times[0] - times[1]);
    knots.extend_from_slice(times);
    knots.push(2.0 * times[n - 1] - times[n - 2]);
    let mut ctrl = Vec::with_capacity(n + 2);
    ctrl.push(reflect(&poses[0], &poses[1]));
    ctrl.extend_from_slice(poses);
    ctrl.push(reflect(&poses[n - 1], &poses[n - 2]));
    (knots, ctrl)
}

/// Rotation taking the averaged specific force to the world vertical (no yaw component).
pub fn gravity_alignment(mean_accel: &Vec3) -> Mat3 {
    let u = mean_accel.normalize();
    let z = Vec3::z();
    let axis = u.cross(&z);
    let s = axis.norm();
    let c = u.dot(&z);
    if s < 1e-12 {
        return if c > 0.0 { Mat3::identity() } else { exp_so3(&Vec3::new(std::f64::consts::PI, 0.0, 0.0)) };
    }
    exp_so3(&(axis / s * s.atan2(c)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct MatchKey(pub usize, pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfelMatch {
    pub first: usize,
    pub second: usize,
    pub normal: Vec3,
    pub weight: f64,
}

/// Reciprocal k-nearest-neighbour matches in descriptor space, per resolution,
/// between surfels whose mean times differ by more than `time_sep_threshold`.
pub fn match_surfels(surfels: &[Surfel], k: usize, time_sep_threshold: f64, sigma: f64) -> Vec<SurfelMatch> {
    let mut by_res: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, s) in surfels.iter().enumerate() {
        by_res.entry(s.resolution.to_bits()).or_default().push(i);
    }
    let mut out = Vec::new();
    for idx in by_res.values() {
        if idx.len() < 2 {
            continue;
        }
        let descs: Vec<[f64; 7]> = idx.iter().map(|&i| descriptor(&surfels[i]).into()).collect();
        let tree = PointIndex::new(&descs);
        let knn: Vec<Vec<usize>> = descs
            .iter()
            .enumerate()
            .map(|(local, d)| {
                tree.nearest_k(d, k + 1).into_iter().map(|(j, _)| j).filter(|&j| j != local).take(k).collect()
            })
            .collect();
        for (a, na) in knn.iter().enumerate() {
            for &b in na {
                if b <= a || !knn[b].contains(&a) {
                    continue;
                }
                let (i, j) = (idx[a], idx[b]);
                if (surfels[i].mean_time - surfels[j].mean_time).abs() <= time_sep_threshold {
                    continue;
                }
                let (vals, vecs) = sorted_eigen(&(surfels[i].covariance + surfels[j].covariance));
                let (i, j) = (i.min(j), i.max(j));
                out.push(SurfelMatch { first: i, second: j, normal: vecs.column(0).into(), weight: 1.0 / (sigma * sigma + vals.x.max(0.0)) });
            }
        }
    }
    out.sort_by(|a, b| (a.first, a.second).cmp(&(b.first, b.second)));
    out
}

/// Near-null direction of the normal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Degeneracy {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub direction: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub corrections: Vec<CorrectionPose>,
    pub bias: ImuBias,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub degeneracy: Option<Degeneracy>,
    /// Marginal covariances of the gyro and accelerometer biases.
    pub bias_covariance: Option<(Mat3, Mat3)>,
}

struct Problem<'a> {
    state: &'a WindowState,
    matches: &'a [SurfelMatch],
    config: &'a OdometryConfig,
    weights: ImuWeights,
    anchor: Matrix6<f64>,
    imu_times: Vec<f64>,
    n: usize,
}

impl<'a> Problem<'a> {
    fn new(state: &'a WindowState, matches: &'a [SurfelMatch], config: &'a OdometryConfig) -> Result<Self, OdometryError> {
        let mut anchor = Matrix6::zeros();
        for k in 0..3 {
            anchor[(k, k)] = 1.0 / config.anchor_rot_sigma;
            anchor[(k + 3, k + 3)] = 1.0 / config.anchor_trans_sigma;
        }
        Ok(Self {
            state,
            matches,
            config,
            weights: config.imu_weights()?,
            anchor,
            imu_times: state.imu.iter().map(|s| s.time).collect(),
            n: state.sample_times.len(),
        })
    }

    fn dim(&self) -> usize {
        6 * self.n + 6
    }

    fn side(&self, i: usize) -> MatchSide {
        let s = &self.state.surfels[i];
        MatchSide { position: s.surfel.position, pivot: s.pivot, time: s.surfel.mean_time }
    }

    /// Calls `f` on every residual with its robust weight set; returns the robust cost.
    fn for_each_residual(
        &self,
        corr: &[CorrectionPose],
        bias: &ImuBias,
        f: &mut dyn FnMut(&Residual),
    ) -> Result<f64, OdometryError> {
        let mut cost = 0.0;
        let c = self.config.cauchy_scale * self.config.lidar_sigma;
        for m in self.matches {
            let mut r = surfel_match_residual(&m.normal, m.weight, &self.side(m.first), &self.side(m.second), corr, &self.state.sample_times)?;
            let cw2 = m.weight * c * c;
            let r2 = r.value[0] * r.value[0];
            r.weight = 1.0 / (1.0 + r2 / cw2);
            cost += cw2 * (r2 / cw2).ln_1p();
            f(&r);
        }
        if self.config.use_imu_terms {
            let win = ImuWindow { times: &self.imu_times, poses: &self.state.imu_poses, samples: &self.state.imu, gravity: self.state.gravity };
            let t0 = self.state.sample_times[0] - 1e-9;
            for k in 0..self.imu_times.len() {
                if self.imu_times[k] < t0 {
                    continue;
                }
                let Some(r) = imu_residuals(k, &win, corr, &self.state.sample_times, bias, &self.state.bias_prior, &self.weights)? else {
                    break;
                };
                for res in [&r.gyro, &r.accel, &r.bias] {
                    cost += res.value.norm_squared();
                    f(res);
                }
            }
        }
        let mut anchor = Residual {
            value: DVector::from_column_slice((self.anchor * corr[0].to_vector()).as_slice()),
            blocks: vec![(Var::Sample(0), DMatrix::from_column_slice(6, 6, self.anchor.as_slice()))],
            weight: 1.0,
        };
        if self.config.anchor_rot_sigma.is_infinite() {
            anchor.weight = 0.0;
        }
        cost += anchor.cost();
        f(&anchor);
        Ok(cost)
    }

    fn cost(&self, corr: &[CorrectionPose], bias: &ImuBias) -> Result<f64, OdometryError> {
        self.for_each_residual(corr, bias, &mut |_| {})
    }

    fn normal_equations(&self, corr: &[CorrectionPose], bias: &ImuBias) -> Result<(DMatrix<f64>, DVector<f64>, f64), OdometryError> {
        let dim = self.dim();
        let n = self.n;
        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        let col = |v: &Var| match v {
            Var::Sample(i) => 6 * i,
            Var::Bias => 6 * n,
        };
        let cost = self.for_each_residual(corr, bias, &mut |r| {
            if r.weight == 0.0 {
                return;
            }
            for (va, ja) in &r.blocks {
                let ca = col(va);
                let jtr = ja.transpose() * &r.value * r.weight;
                let mut gv = g.rows_mut(ca, 6);
                gv += jtr;
                for (vb, jb) in &r.blocks {
                    let cb = col(vb);
                    let blk = ja.transpose() * jb * r.weight;
                    let mut hv = h.view_mut((ca, cb), (6, 6));
                    hv += blk;
                }
            }
        })?;
        if !self.config.use_imu_terms {
            for k in 0..6 {
                h[(6 * n + k, 6 * n + k)] = 1.0;
            }
        }
        Ok((h, g, cost))
    }
}

fn solve_damped(h: &DMatrix<f64>, g: &DVector<f64>) -> (DVector<f64>, Option<DMatrix<f64>>) {
    let dim = h.nrows();
    let max_diag = (0..dim).map(|i| h[(i, i)]).fold(0.0f64, f64::max).max(1.0);
    let mut hd = h.clone();
    for i in 0..dim {
        hd[(i, i)] += 1e-6 * h[(i, i)] + 1e-12 * max_diag;
    }
    match hd.clone().cholesky() {
        Some(ch) => (-ch.solve(g), Some(ch.inverse())),
        None => {
            // eigen pseudo-inverse on indefinite systems
            let eig = SymmetricEigen::new(hd);
            let tol = 1e-12 * eig.eigenvalues.amax();
            let mut x = DVector::zeros(dim);
            for k in 0..dim {
                let l = eig.eigenvalues[k];
                if l > tol {
                    let v = eig.eigenvectors.column(k);
                    x -= v * (v.dot(g) / l);
                }
            }
            (x, None)
        }
    }
}

fn degeneracy(h: &DMatrix<f64>, n_samples: usize, ratio: f64) -> Option<Degeneracy> {
    let m = 6 * n_samples;
    let eig = SymmetricEigen::new(h.view((0, 0), (m, m)).into_owned());
    let (mut lo, mut hi) = (0, 0);
    for k in 0..m {
        if eig.eigenvalues[k] < eig.eigenvalues[lo] {
            lo = k;
        }
        if eig.eigenvalues[k] > eig.eigenvalues[hi] {
            hi = k;
        }
    }
    let (lmin, lmax) = (eig.eigenvalues[lo], eig.eigenvalues[hi]);
    (lmin <= ratio * lmax).then(|| Degeneracy { min_eigenvalue: lmin, max_eigenvalue: lmax, direction: eig.eigenvectors.column(lo).into_owned() })
}

fn step(corr: &[CorrectionPose], bias: &ImuBias, dx: &DVector<f64>, s: f64, with_bias: bool) -> (Vec<CorrectionPose>, ImuBias) {
    let c = corr
        .iter()
        .enumerate()
        .map(|(i, c)| CorrectionPose::new(c.rot_vec + dx.fixed_rows::<3>(6 * i) * s, c.trans + dx.fixed_rows::<3>(6 * i + 3) * s))
        .collect();
    let n = corr.len();
    let b = if with_bias {
        ImuBias { gyro: bias.gyro + dx.fixed_rows::<3>(6 * n) * s, accel: bias.accel + dx.fixed_rows::<3>(6 * n + 3) * s }
    } else {
        *bias
    };
    (c, b)
}

/// Gauss-Newton with IRLS weights and step halving, starting from zero corrections.
pub fn solve_corrections(state: &WindowState, matches: &[SurfelMatch], config: &OdometryConfig) -> Result<SolveOutcome, OdometryError> {
    if matches.is_empty() && (!config.use_imu_terms || state.imu.len() < 3) {
        return Err(OdometryError::NotEnoughImu("no matches and no usable IMU terms".into()));
    }
    let problem = Problem::new(state, matches, config)?;
    let mut corr = vec![CorrectionPose::zero(); problem.n];
    let mut bias = state.bias.estimate;
    let initial_cost = problem.cost(&corr, &bias)?;
    let mut cost = initial_cost;
    let mut iterations = 0;
    let mut degen = None;
    let mut bias_cov = None;
    for it in 0..config.gn_iters {
        let (h, g, c0) = problem.normal_equations(&corr, &bias)?;
        cost = c0;
        if it == 0 {
            degen = degeneracy(&h, problem.n, config.degeneracy_ratio);
        }
        let (dx, inv) = solve_damped(&h, &g);
        if config.use_imu_terms {
            if let Some(inv) = &inv {
                let b = 6 * problem.n;
                bias_cov = Some((inv.fixed_view::<3, 3>(b, b).into_owned(), inv.fixed_view::<3, 3>(b + 3, b + 3).into_owned()));
            }
        }
        let mut accepted = false;
        let mut s = 1.0;
        for _ in 0..8 {
            let (c_try, b_try) = step(&corr, &bias, &dx, s, config.use_imu_terms);
            let new_cost = problem.cost(&c_try, &b_try)?;
            if new_cost <= cost {
                corr = c_try;
                bias = b_try;
                cost = new_cost;
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        iterations += 1;
        if !accepted || dx.norm() < 1e-12 {
            break;
        }
    }
    Ok(SolveOutcome { corrections: corr, bias, initial_cost, final_cost: cost, iterations, degeneracy: degen, bias_covariance: bias_cov })
}

/// Per-window diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowReport {
    pub index: usize,
    pub t_end: f64,
    pub solve_ms: f64,
    pub surfels: usize,
    pub matches: usize,
    pub degenerate: bool,
}

impl WindowState {
    pub fn new(config: &OdometryConfig) -> Self {
        Self {
            imu: Vec::new(),
            imu_poses: Vec::new(),
            imu_base: 0,
            sample_times: Vec::new(),
            sample_poses: Vec::new(),
            points: Vec::new(),
            point_base: 0,
            surfels: Vec::new(),
            bias: BiasState::new(config),
            bias_prior: ImuBias::default(),
            gravity: config.gravity_vector(),
        }
    }

    pub fn imu_times(&self) -> Vec<f64> {
        self.imu.iter().map(|s| s.time).collect()
    }

    /// Pose at time `t` from the bracketing IMU poses.
    pub fn pose_at(&self, t: f64) -> Result<Pose, OdometryError> {
        let times = self.imu_times();
        let (k, a) = bracket(&times, t)?;
        Ok(if k + 1 >= self.imu_poses.len() { self.imu_poses[k] } else { interpolate_pose(&self.imu_poses[k], &self.imu_poses[k + 1], a) })
    }

    /// Appends IMU samples, propagating poses by strapdown integration.
    pub fn init_new_imu_poses(&mut self, new_imu: &[ImuSample], config: &OdometryConfig) -> Result<(), OdometryError> {
        let max_gap = 5.0 * config.imu_dt;
        let mut prev_t = self.imu.last().map(|s| s.time);
        for s in new_imu {
            if let Some(p) = prev_t {
                if s.time <= p {
                    return Err(OdometryError::NonMonotonic(s.time));
                }
                if s.time - p > max_gap + 1e-12 {
                    return Err(OdometryError::ImuGap { after: p, gap: s.time - p });
                }
            }
            prev_t = Some(s.time);
        }
        let b = self.bias.estimate;
        let g = self.gravity;
        for s in new_imu {
            let n = self.imu.len();
            let pose = match n {
                0 => {
                    let m = config.init_samples.min(new_imu.len()).max(1);
                    let mean = new_imu[..m].iter().map(|x| x.accel).sum::<Vec3>() / m as f64 - b.accel;
                    Pose::from_rotation(gravity_alignment(&mean))
                }
                1 => {
                    // start from rest
                    let (p0, s0) = (self.imu_poses[0], self.imu[0]);
                    let h = s.time - s0.time;
                    Pose::new(
                        p0.rotation * exp_so3(&((s0.gyro - b.gyro) * h)),
                        p0.translation + (p0.rotation * (s0.accel - b.accel) + g) * (0.5 * h * h),
                    )
                }
                _ => {
                    let (pm, p0) = (self.imu_poses[n - 2], self.imu_poses[n - 1]);
                    let (sm, s0) = (self.imu[n - 2], self.imu[n - 1]);
                    let h1 = s0.time - sm.time;
                    let h2 = s.time - s0.time;
                    let acc = pm.rotation * (sm.accel - b.accel) + g;
                    let vel = (p0.translation - pm.translation) / h1;
                    Pose::new(
                        orthonormalize(&(p0.rotation * exp_so3(&((s0.gyro - b.gyro) * h2)))),
                        p0.translation + vel * h2 + acc * (0.5 * h2 * (h1 + h2)),
                    )
                }
            };
            self.imu.push(*s);
            self.imu_poses.push(pose);
        }
        Ok(())
    }

    /// Equidistant sample times over the IMU span, with poses read off the IMU trajectory.
    pub fn resample(&mut self, n: usize) -> Result<(), OdometryError> {
        let (t0, t1) = (self.imu[0].time, self.imu[self.imu.len() - 1].time);
        self.sample_times = (0..n).map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64).collect();
        self.sample_poses = interpolate_point_poses(&self.sample_times, &self.imu_times(), &self.imu_poses)?;
        Ok(())
    }

    /// Left rotation / additive translation update of the sample poses.
    pub fn apply_corrections(&mut self, corrections: &[CorrectionPose]) {
        for (p, c) in self.sample_poses.iter_mut().zip(corrections) {
            *p = Pose::new(orthonormalize(&(exp_so3(&c.rot_vec) * p.rotation)), c.trans + p.translation);
        }
    }

    /// Moves every IMU pose by the ratio of the corrected-sample spline to the spline of the
    /// current trajectory at the sample times.
    pub fn update_imu_poses(&mut self) -> Result<(), OdometryError> {
        if self.sample_poses.len() < 4 {
            return Err(GeometryError::TooFewControls(self.sample_poses.len()).into());
        }
        let before = interpolate_point_poses(&self.sample_times, &self.imu_times(), &self.imu_poses)?;
        let (knots, ctrl) = padded_controls(&self.sample_times, &self.sample_poses);
        let corrected = PoseSpline::new(knots.clone(), ctrl)?;
        let current = PoseSpline::new(knots, padded_controls(&self.sample_times, &before).1)?;
        for (s, pose) in self.imu.iter().zip(self.imu_poses.iter_mut()) {
            let a = corrected.eval_clamped(s.time);
            let b = current.eval_clamped(s.time);
            let dr = a.rotation * b.rotation.transpose();
            let dt = a.translation - b.translation;
            *pose = Pose::new(orthonormalize(&(dr * pose.rotation)), dt + pose.translation);
        }
        Ok(())
    }

    fn interval_logs(&self) -> Vec<Vec3> {
        self.imu_poses.windows(2).map(|w| log_so3_unchecked(&(w[0].rotation.transpose() * w[1].rotation))).collect()
    }

    fn place(&self, logs: &[Vec3], rec: &PointRecord) -> Vec3 {
        let k = rec.imu_index - self.imu_base;
        let p = &self.imu_poses[k];
        if rec.alpha == 0.0 || k >= logs.len() {
            return p.transform_point(&rec.body);
        }
        let q = &self.imu_poses[k + 1];
        let r = p.rotation * exp_so3(&(logs[k] * rec.alpha));
        r * rec.body + p.translation * (1.0 - rec.alpha) + q.translation * rec.alpha
    }

    /// Re-places all points on the current trajectory and refits every surfel from its members.
    pub fn reproject_surfels(&mut self) {
        let logs = self.interval_logs();
        let worlds: Vec<Vec3> = self.points.iter().map(|r| self.place(&logs, r)).collect();
        for (r, w) in self.points.iter_mut().zip(worlds) {
            r.world = w;
        }
        let times = self.imu_times();
        for ws in &mut self.surfels {
            let pts = ws.members.iter().map(|&g| {
                let r = &self.points[g - self.point_base];
                (r.time, r.world)
            });
            let (mean, cov, mt, count) = point_moments(pts);
            let pivot = bracket(&times, mt)
                .map(|(k, a)| self.imu_poses[k].translation * (1.0 - a) + self.imu_poses[(k + 1).min(self.imu_poses.len() - 1)].translation * a)
                .unwrap_or(ws.pivot);
            ws.surfel = surfel_from_moments(mean, cov, mt, count, ws.surfel.resolution, &pivot);
            ws.pivot = pivot;
        }
    }

    /// Adds new points and extracts surfels from them, one chunk per `chunk` seconds.
    pub fn add_points(&mut self, new_points: &[LidarPoint], chunk_origin: f64, chunk: f64, params: &SurfelParams) -> Result<(), OdometryError> {
        let times = self.imu_times();
        let logs = self.interval_logs();
        let mut chunks: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for p in new_points {
            let (k, alpha) = bracket(&times, p.time)?;
            let mut rec = PointRecord { time: p.time, body: p.position, imu_index: k + self.imu_base, alpha, world: Vec3::zeros() };
            rec.world = self.place(&logs, &rec);
            let global = self.point_base + self.points.len();
            chunks.entry(((p.time - chunk_origin) / chunk + 1e-9).floor() as i64).or_default().push(global);
            self.points.push(rec);
        }
        for members in chunks.values() {
            let stamped: Vec<StampedPoint> = members
                .iter()
                .map(|&g| {
                    let r = &self.points[g - self.point_base];
                    StampedPoint { time: r.time, position: r.world }
                })
                .collect();
            let poses = &self.imu_poses;
            let sensor = |t: f64| match bracket(&times, t) {
                Ok((k, a)) => poses[k].translation * (1.0 - a) + poses[(k + 1).min(poses.len() - 1)].translation * a,
                Err(_) => Vec3::zeros(),
            };
            let extracted: Vec<WindowSurfel> = extract_multires_with_members(&stamped, &sensor, params)
                .into_iter()
                .map(|e| {
                    let pivot = sensor(e.surfel.mean_time);
                    WindowSurfel { surfel: e.surfel, members: e.members.iter().map(|&i| members[i]).collect(), pivot }
                })
                .collect();
            self.surfels.extend(extracted);
        }
        Ok(())
    }

    /// Removes IMU samples before `t_start` (keeping one bracketing sample if needed) and
    /// the points and surfels that fall before the new first IMU time.
    pub fn drop_before(&mut self, t_start: f64) -> (Vec<(ImuSample, Pose)>, Vec<PointRecord>) {
        let tol = 1e-9;
        let mut cut = self.imu.partition_point(|s| s.time < t_start - tol);
        if cut > 0 && cut < self.imu.len() && self.imu[cut].time > t_start + tol {
            cut -= 1;
        }
        let cut = cut.min(self.imu.len().saturating_sub(2));
        let new_base = self.imu_base + cut;
        let pcut = self.points.partition_point(|r| r.imu_index < new_base);
        let dropped_points: Vec<PointRecord> = self.points.drain(..pcut).collect();
        let first_kept = self.point_base + pcut;
        self.point_base = first_kept;
        self.surfels.retain(|s| s.members.iter().all(|&g| g >= first_kept));
        let imu: Vec<ImuSample> = self.imu.drain(..cut).collect();
        let poses: Vec<Pose> = self.imu_poses.drain(..cut).collect();
        self.imu_base += cut;
        (imu.into_iter().zip(poses).collect(), dropped_points)
    }

    pub fn surfel_list(&self) -> Vec<Surfel> {
        self.surfels.iter().map(|s| s.surfel.clone()).collect()
    }

    /// One outer iteration: match, solve, apply, update and reproject.
    pub fn outer_iteration(&mut self, config: &OdometryConfig) -> Result<(usize, Option<SolveOutcome>), OdometryError> {
        self.resample(config.sample_count())?;
        let surfels = self.surfel_list();
        let matches = match_surfels(&surfels, config.knn, config.time_sep_threshold, config.lidar_sigma);
        let outcome = match solve_corrections(self, &matches, config) {
            Ok(o) => o,
            Err(OdometryError::NotEnoughImu(_)) => return Ok((0, None)),
            Err(e) => return Err(e),
        };
        self.apply_corrections(&outcome.corrections);
        self.update_imu_poses()?;
        if config.use_imu_terms {
            self.bias.estimate = outcome.bias;
        }
        self.reproject_surfels();
        Ok((matches.len(), Some(outcome)))
    }
}

/// Collects finalised odometry into six-second submaps emitted every five seconds.
#[derive(Debug, Clone)]
struct SubmapBuilder {
    agent: u32,
    seq: u64,
    start: Option<f64>,
    imu: Vec<(ImuSample, Pose, ImuBias)>,
    points: Vec<(f64, Vec3)>,
    prev_base: Option<Pose>,
}

impl SubmapBuilder {
    fn new(agent: u32) -> Self {
        Self { agent, seq: 0, start: None, imu: Vec::new(), points: Vec::new(), prev_base: None }
    }

    fn push(&mut self, imu: &[(ImuSample, Pose)], bias: ImuBias, points: &[PointRecord]) {
        if self.start.is_none() {
            self.start = imu.first().map(|(s, _)| s.time);
        }
        self.imu.extend(imu.iter().map(|(s, p)| (*s, *p, bias)));
        self.points.extend(points.iter().map(|r| (r.time, r.world)));
    }

    fn ready(&mut self, config: &OdometryConfig, flush: bool) -> Vec<Submap> {
        let mut out = Vec::new();
        while let Some(start) = self.start {
            let end = start + config.submap_length;
            let last = match self.imu.last() {
                Some((s, _, _)) => s.time,
                None => break,
            };
            let complete = last >= end - 1e-9;
            if !complete && !(flush && last - start >= 0.5 * config.submap_length) {
                break;
            }
            if let Some(sm) = self.build(start, end.min(last), config) {
                out.push(sm);
            }
            let next = start + config.submap_period;
            self.imu.retain(|(s, _, _)| s.time >= next - 1e-9);
            self.points.retain(|(t, _)| *t >= next - 1e-9);
            self.start = if complete { Some(next) } else { None };
            if !complete {
                break;
            }
        }
        out
    }

    fn build(&mut self, start: f64, end: f64, config: &OdometryConfig) -> Option<Submap> {
        let imu: Vec<&(ImuSample, Pose, ImuBias)> = self.imu.iter().filter(|(s, _, _)| s.time >= start - 1e-9 && s.time <= end + 1e-9).collect();
        if imu.len() < 3 {
            return None;
        }
        let base = imu[0].1;
        let inv = base.inverse();
        let times: Vec<f64> = imu.iter().map(|(s, _, _)| s.time).collect();
        let poses: Vec<Pose> = imu.iter().map(|(_, p, _)| *p).collect();
        let pts: Vec<StampedPoint> = self
            .points
            .iter()
            .filter(|(t, _)| *t >= start - 1e-9 && *t <= end + 1e-9)
            .map(|(t, w)| StampedPoint { time: *t, position: inv.transform_point(w) })
            .collect();
        let sensor = |t: f64| {
            interpolate_point_poses(&[t], &times, &poses).map(|p| inv.transform_point(&p[0].translation)).unwrap_or_else(|_| Vec3::zeros())
        };
        let params = SurfelParams { time_gap: f64::INFINITY, resolutions: config.submap_resolutions.clone(), ..config.surfel.clone() };
        let surfels: Vec<MapSurfel> = extract_multires_with_members(&pts, &sensor, &params).into_iter().map(|e| MapSurfel::from(&e.surfel)).collect();

        // gravity direction from specific force minus trajectory acceleration
        let mut up = Vec3::zeros();
        for k in 0..imu.len() - 2 {
            let (h1, h2) = (times[k + 1] - times[k], times[k + 2] - times[k + 1]);
            let acc = ((poses[k + 2].translation - poses[k + 1].translation) / h2 - (poses[k + 1].translation - poses[k].translation) / h1)
                * (2.0 / (h1 + h2));
            let (s, p, b) = imu[k];
            up += p.rotation * (s.accel - b.accel) - acc;
        }
        let up_local = (base.rotation.transpose() * up).normalize();

        let odom_edge = self.prev_base.map(|prev| {
            let mut cov = Matrix6::zeros();
            for k in 0..3 {
                cov[(k, k)] = config.odom_edge_rot_sigma.powi(2);
                cov[(k + 3, k + 3)] = config.odom_edge_trans_sigma.powi(2);
            }
            (prev.between(&base), cov)
        });
        self.prev_base = Some(base);
        let sm = Submap {
            id: SubmapId { agent: self.agent, seq: self.seq },
            t0: start,
            t1: end,
            base_pose: base,
            surfels,
            up_local,
            odom_edge,
        };
        self.seq += 1;
        Some(sm)
    }
}

/// Streaming odometry front end.
#[derive(Debug, Clone)]
pub struct Odometry {
    pub config: OdometryConfig,
    state: WindowState,
    imu_buf: Vec<ImuSample>,
    lidar_buf: Vec<LidarPoint>,
    origin: Option<f64>,
    t_end: f64,
    window_index: usize,
    trajectory: Vec<(f64, Pose)>,
    submaps: Vec<Submap>,
    reports: Vec<WindowReport>,
    builder: SubmapBuilder,
    finished: bool,
}

impl Odometry {
    pub fn new(config: OdometryConfig, agent: u32) -> Result<Self, OdometryError> {
        config.validate()?;
        Ok(Self {
            state: WindowState::new(&config),
            config,
            imu_buf: Vec::new(),
            lidar_buf: Vec::new(),
            origin: None,
            t_end: 0.0,
            window_index: 0,
            trajectory: Vec::new(),
            submaps: Vec::new(),
            reports: Vec::new(),
            builder: SubmapBuilder::new(agent),
            finished: false,
        })
    }

    pub fn state(&self) -> &WindowState {
        &self.state
    }

    pub fn push_imu(&mut self, imu: &[ImuSample]) {
        self.imu_buf.extend_from_slice(imu);
    }

    pub fn push_lidar(&mut self, pts: &[LidarPoint]) {
        self.lidar_buf.extend_from_slice(pts);
    }

    /// Finalised poses (one per IMU timestamp) not yet taken.
    pub fn take_trajectory(&mut self) -> Vec<(f64, Pose)> {
        std::mem::take(&mut self.trajectory)
    }

    pub fn take_submaps(&mut self) -> Vec<Submap> {
        std::mem::take(&mut self.submaps)
    }

    pub fn reports(&self) -> &[WindowReport] {
        &self.reports
    }

    fn next_end(&self) -> Option<f64> {
        match self.origin {
            None => self.imu_buf.first().map(|s| s.time + self.config.window_length),
            Some(_) => Some(self.t_end + self.config.slide),
        }
    }

    /// Processes every window whose data is fully buffered. Returns the number processed.
    pub fn run_available(&mut self) -> Result<usize, OdometryError> {
        let mut count = 0;
        while let Some(end) = self.next_end() {
            let have = self.imu_buf.last().map(|s| s.time).unwrap_or(f64::NEG_INFINITY);
            if have < end - 1e-9 {
                break;
            }
            self.process_window(end)?;
            count += 1;
        }
        Ok(count)
    }

    /// Slides the window to end at `t_end` and runs the outer iterations.
    pub fn process_window(&mut self, t_end: f64) -> Result<(), OdometryError> {
        let tol = 1e-9;
        let cfg = self.config.clone();
        let first = self.origin.is_none();
        if first {
            let t0 = self.imu_buf.first().map(|s| s.time).ok_or_else(|| OdometryError::NotEnoughImu("empty IMU stream".into()))?;
            self.origin = Some(t0);
            self.lidar_buf.retain(|p| p.time >= t0);
        }
        self.t_end = t_end;
        let n_imu = self.imu_buf.partition_point(|s| s.time <= t_end + tol);
        let new_imu: Vec<ImuSample> = self.imu_buf.drain(..n_imu).collect();
        self.state.init_new_imu_poses(&new_imu, &cfg)?;
        if self.state.imu.len() < 4 {
            return Err(OdometryError::NotEnoughImu("window holds fewer than 4 IMU samples".into()));
        }
        self.lidar_buf.sort_by(|a, b| a.time.total_cmp(&b.time));
        let last_imu = self.state.imu[self.state.imu.len() - 1].time;
        let n_pts = self.lidar_buf.partition_point(|p| p.time <= last_imu + tol);
        let new_pts: Vec<LidarPoint> = self.lidar_buf.drain(..n_pts).collect();

        let t_start = t_end - cfg.window_length;
        self.finalize_before(t_start);
        let origin = self.origin.unwrap_or(0.0);
        let start = self.state.imu[0].time;
        let new_pts: Vec<LidarPoint> = new_pts.into_iter().filter(|p| p.time >= start - tol).collect();
        self.state.add_points(&new_pts, origin, cfg.slide, &cfg.surfel)?;
        self.state.reproject_surfels();

        let clock = Instant::now();
        let mut matches = 0;
        let mut degenerate = false;
        for _ in 0..cfg.outer_iters {
            let (m, outcome) = self.state.outer_iteration(&cfg)?;
            matches = m;
            if let Some(o) = outcome {
                log::trace!("outer: matches {} cost {:.6e} -> {:.6e} maxcorr {:.3e}", m, o.initial_cost, o.final_cost, o.corrections.iter().map(|c| c.trans.norm() + c.rot_vec.norm()).fold(0.0, f64::max));
                if let Some(d) = &o.degeneracy {
                    degenerate = true;
                    log::debug!("window {} degenerate: λmin/λmax = {:.3e}", self.window_index, d.min_eigenvalue / d.max_eigenvalue);
                }
                if let Some((cg, ca)) = o.bias_covariance {
                    self.state.bias.cov_gyro = cg;
                    self.state.bias.cov_accel = ca;
                }
            }
        }
        self.state.bias_prior = self.state.bias.estimate;
        self.reports.push(WindowReport {
            index: self.window_index,
            t_end,
            solve_ms: clock.elapsed().as_secs_f64() * 1e3,
            surfels: self.state.surfels.len(),
            matches,
            degenerate,
        });
        self.window_index += 1;
        let sms = self.builder.ready(&cfg, false);
        self.submaps.extend(sms);
        Ok(())
    }

    fn finalize_before(&mut self, t: f64) {
        let (imu, pts) = self.state.drop_before(t);
        self.trajectory.extend(imu.iter().map(|(s, p)| (s.time, *p)));
        self.builder.push(&imu, self.state.bias.estimate, &pts);
    }

    /// Processes remaining complete windows and finalises everything still held.
    pub fn finish(&mut self) -> Result<(), OdometryError> {
        if self.finished {
            return Ok(());
        }
        self.run_available()?;
        self.finished = true;
        let state = &mut self.state;
        let imu: Vec<(ImuSample, Pose)> = state.imu.drain(..).zip(state.imu_poses.drain(..)).collect();
        let pts: Vec<PointRecord> = state.points.drain(..).collect();
        state.surfels.clear();
        self.trajectory.extend(imu.iter().map(|(s, p)| (s.time, *p)));
        self.builder.push(&imu, state.bias.estimate, &pts);
        let sms = self.builder.ready(&self.config, true);
        self.submaps.extend(sms);
        Ok(())
    }
}

/// Full offline run over recorded streams.
#[derive(Debug, Clone)]
pub struct OdometryOutput {
    pub trajectory: Vec<(f64, Pose)>,
    pub submaps: Vec<Submap>,
    pub reports: Vec<WindowReport>,
}

pub fn run_odometry(imu: &[ImuSample], lidar: &[LidarPoint], config: &OdometryConfig, agent: u32) -> Result<OdometryOutput, OdometryError> {
    let mut odo = Odometry::new(config.clone(), agent)?;
    odo.push_imu(imu);
    odo.push_lidar(lidar);
    odo.finish()?;
    Ok(OdometryOutput { trajectory: odo.take_trajectory(), submaps: odo.take_submaps(), reports: odo.reports.clone() })
}

/// `time tx ty tz qx qy qz qw` per line.
pub fn write_tum_lines<W: Write>(mut w: W, poses: &[(f64, Pose)]) -> io::Result<()> {
    for (t, p) in poses {
        let q = p.quaternion();
        let c = q.coords;
        writeln!(w, "{} {} {} {} {} {} {} {}", t, p.translation.x, p.translation.y, p.translation.z, c.x, c.y, c.z, c.w)?;
    }
    Ok(())
}

/// Reference translation at `t` from a sorted trajectory (linear in position).
pub fn trajectory_position(traj: &[(f64, Pose)], t: f64) -> Option<Vec3> {
    let times: Vec<f64> = traj.iter().map(|(t, _)| *t).collect();
    let (k, a) = bracket(&times, t).ok()?;
    let k1 = (k + 1).min(traj.len() - 1);
    Some(traj[k].1.translation * (1.0 - a) + traj[k1].1.translation * a)
}

/// Minimum-eigenvalue helper for thickness measurements.
pub fn plane_thickness(cov: &Mat3) -> f64 {
    sorted_eigen(cov).0.x
}

/// Interpolated correction at `t` for inspection tools.
pub fn correction_at(corrections: &[CorrectionPose], sample_times: &[f64], t: f64) -> Result<CorrectionPose, OdometryError> {
    let ic = interp_correction(corrections, sample_times, t)?;
    Ok(CorrectionPose::new(ic.rot, ic.trans))
}
