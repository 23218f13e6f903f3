//! Residuals and analytic Jacobians for the window optimisation.
//!
//! Variables are per-sample corrections `(r, p)` applied as `(exp(r)·R̂, p + t̂)` plus one
//! IMU bias pair per window. Corrections at arbitrary times are blended linearly between
//! the two bracketing samples. Jacobians are exact in `r` (through the right Jacobian),
//! so they agree with finite differences at any linearisation point.

use crate::geometry::{exp_so3, hat, log_so3_unchecked, right_jacobian, right_jacobian_inv, Mat3, Pose, TangentPose, Vec3};
use crate::odometry::ImuSample;
use nalgebra::{DMatrix, DVector, Matrix3x6};
use thiserror::Error;

pub type CorrectionPose = TangentPose;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("time {t} outside sample span [{lo}, {hi}]")]
    OutOfSpan { t: f64, lo: f64, hi: f64 },
    #[error("need at least two sample times")]
    TooFewSamples,
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolatedCorrection {
    pub rot: Vec3,
    pub trans: Vec3,
    pub alpha: f64,
    pub a: usize,
    pub b: usize,
}

impl InterpolatedCorrection {
    /// Blend weights of samples `a` and `b`.
    pub fn weights(&self) -> (f64, f64) {
        (1.0 - self.alpha, self.alpha)
    }

    /// `(exp(r̄)·R, t̄ + t)`
    pub fn apply(&self, pose: &Pose) -> Pose {
        Pose::new(exp_so3(&self.rot) * pose.rotation, self.trans + pose.translation)
    }
}

/// Locates the sample interval containing `tau` and blends its two corrections.
pub fn interp_correction(corrections: &[CorrectionPose], sample_times: &[f64], tau: f64) -> Result<InterpolatedCorrection, CostError> {
    let n = sample_times.len();
    if n < 2 || corrections.len() != n {
        return Err(CostError::TooFewSamples);
    }
    let (lo, hi) = (sample_times[0], sample_times[n - 1]);
    let tol = 1e-9 * (hi - lo).abs().max(1.0);
    if !(tau >= lo - tol && tau <= hi + tol) {
        return Err(CostError::OutOfSpan { t: tau, lo, hi });
    }
    let a = sample_times.partition_point(|&t| t <= tau).saturating_sub(1).min(n - 2);
    let b = a + 1;
    let alpha = ((tau - sample_times[a]) / (sample_times[b] - sample_times[a])).clamp(0.0, 1.0);
    let (ca, cb) = (&corrections[a], &corrections[b]);
    Ok(InterpolatedCorrection {
        rot: crate::geometry::rot_interpolate(&cb.rot_vec, &ca.rot_vec, alpha),
        trans: crate::geometry::lin_interpolate(&cb.trans, &ca.trans, alpha),
        alpha,
        a,
        b,
    })
}

/// Variable block a Jacobian refers to; each spans six columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Var {
    /// Correction `(r, p)` of sample `i`.
    Sample(usize),
    /// Window bias `(b_ω, b_a)`.
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub value: DVector<f64>,
    pub blocks: Vec<(Var, DMatrix<f64>)>,
    /// Robust (IRLS) weight applied to the squared residual.
    pub weight: f64,
}

impl Residual {
    fn new(value: DVector<f64>) -> Self {
        Self { value, blocks: Vec::new(), weight: 1.0 }
    }

    /// Adds `jac` to the block of `var`, creating it if needed.
    fn add(&mut self, var: Var, jac: DMatrix<f64>) {
        if let Some((_, j)) = self.blocks.iter_mut().find(|(v, _)| *v == var) {
            *j += jac;
        } else {
            self.blocks.push((var, jac));
        }
    }

    /// Whitens value and Jacobians with `L` (so the cost becomes `‖L r‖²`).
    fn whiten(mut self, sqrt_info: &Mat3) -> Self {
        let l = DMatrix::from_column_slice(3, 3, sqrt_info.as_slice());
        self.value = &l * &self.value;
        for (_, j) in &mut self.blocks {
            *j = &l * &*j;
        }
        self
    }

    pub fn cost(&self) -> f64 {
        self.weight * self.value.norm_squared()
    }

    /// Dense Jacobian over `n_samples` samples followed by the bias block.
    pub fn dense_jacobian(&self, n_samples: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.value.len(), 6 * n_samples + 6);
        for (var, j) in &self.blocks {
            let col = match var {
                Var::Sample(i) => 6 * i,
                Var::Bias => 6 * n_samples,
            };
            out.view_mut((0, col), (j.nrows(), 6)).copy_from(j);
        }
        out
    }
}

/// Distributes a 3×6 Jacobian w.r.t. an interpolated correction onto its two samples.
fn add_interpolated(res: &mut Residual, ic: &InterpolatedCorrection, jac: &Matrix3x6<f64>) {
    let (wa, wb) = ic.weights();
    let j = DMatrix::from_column_slice(3, 6, jac.as_slice());
    if wa != 0.0 {
        res.add(Var::Sample(ic.a), &j * wa);
    }
    if wb != 0.0 {
        res.add(Var::Sample(ic.b), &j * wb);
    }
}

/// One side of a surfel correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchSide {
    /// Surfel centre in the world frame under the current trajectory.
    pub position: Vec3,
    /// Trajectory position at the surfel's mean time; rotation corrections pivot about it.
    pub pivot: Vec3,
    pub time: f64,
}

impl MatchSide {
    fn corrected(&self, ic: &InterpolatedCorrection) -> (Vec3, Matrix3x6<f64>) {
        let rel = self.position - self.pivot;
        let r = exp_so3(&ic.rot);
        let q = r * rel + self.pivot + ic.trans;
        let mut j = Matrix3x6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r * hat(&rel) * right_jacobian(&ic.rot)));
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
        (q, j)
    }
}

/// Scalar point-to-plane residual `√w·⟨n, q' − q⟩` between corrected surfel centres.
pub fn surfel_match_residual(
    normal: &Vec3,
    weight: f64,
    s: &MatchSide,
    s2: &MatchSide,
    corrections: &[CorrectionPose],
    sample_times: &[f64],
) -> Result<Residual, CostError> {
    let ic = interp_correction(corrections, sample_times, s.time)?;
    let ic2 = interp_correction(corrections, sample_times, s2.time)?;
    let (q, jq) = s.corrected(&ic);
    let (q2, jq2) = s2.corrected(&ic2);
    let sw = weight.sqrt();
    let mut res = Residual::new(DVector::from_element(1, sw * normal.dot(&(q2 - q))));
    let row = normal.transpose() * sw;
    for (ic, jac, sign) in [(&ic2, jq2, 1.0), (&ic, jq, -1.0)] {
        let r = row * jac * sign;
        let (wa, wb) = ic.weights();
        let j = DMatrix::from_row_slice(1, 6, r.as_slice());
        if wa != 0.0 {
            res.add(Var::Sample(ic.a), &j * wa);
        }
        if wb != 0.0 {
            res.add(Var::Sample(ic.b), &j * wb);
        }
    }
    Ok(res)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuBias {
    pub gyro: Vec3,
    pub accel: Vec3,
}

impl Default for ImuBias {
    fn default() -> Self {
        Self { gyro: Vec3::zeros(), accel: Vec3::zeros() }
    }
}

/// Square-root information matrices of the IMU cost terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuWeights {
    pub gyro: Mat3,
    pub accel: Mat3,
    pub bias_gyro: Mat3,
    pub bias_accel: Mat3,
}

/// `L⁻¹` where `Σ = L·Lᵀ`, so that `‖L⁻¹r‖² = rᵀΣ⁻¹r`.
pub fn sqrt_information(cov: &Mat3) -> Result<Mat3, CostError> {
    let chol = cov.cholesky().ok_or(CostError::NotPositiveDefinite)?;
    chol.l().try_inverse().ok_or(CostError::NotPositiveDefinite)
}

impl ImuWeights {
    pub fn from_covariances(gyro: &Mat3, accel: &Mat3, bias_gyro: &Mat3, bias_accel: &Mat3) -> Result<Self, CostError> {
        Ok(Self {
            gyro: sqrt_information(gyro)?,
            accel: sqrt_information(accel)?,
            bias_gyro: sqrt_information(bias_gyro)?,
            bias_accel: sqrt_information(bias_accel)?,
        })
    }
}

/// Uncorrected trajectory and measurements the IMU terms read from.
#[derive(Debug, Clone, Copy)]
pub struct ImuWindow<'a> {
    pub times: &'a [f64],
    pub poses: &'a [Pose],
    pub samples: &'a [ImuSample],
    pub gravity: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuResiduals {
    pub gyro: Residual,
    pub accel: Residual,
    pub bias: Residual,
}

/// Gyro, accelerometer and bias-anchor residuals at IMU index `k`.
///
/// Returns `None` when `k + 2` falls outside the window (no forward differences available).
pub fn imu_residuals(
    k: usize,
    win: &ImuWindow<'_>,
    corrections: &[CorrectionPose],
    sample_times: &[f64],
    bias: &ImuBias,
    bias_prior: &ImuBias,
    weights: &ImuWeights,
) -> Result<Option<ImuResiduals>, CostError> {
    if k + 2 >= win.times.len() || k + 2 >= win.poses.len() {
        return Ok(None);
    }
    let mut ic = [InterpolatedCorrection { rot: Vec3::zeros(), trans: Vec3::zeros(), alpha: 0.0, a: 0, b: 0 }; 3];
    for j in 0..3 {
        ic[j] = interp_correction(corrections, sample_times, win.times[k + j])?;
    }
    let rhat = [win.poses[k].rotation, win.poses[k + 1].rotation];
    let rt0 = exp_so3(&ic[0].rot) * rhat[0];
    let rt1 = exp_so3(&ic[1].rot) * rhat[1];
    let h1 = win.times[k + 1] - win.times[k];
    let h2 = win.times[k + 2] - win.times[k + 1];
    let meas = &win.samples[k];

    // gyro: ω − log(R̃₀ᵀR̃₁)/h − b_ω
    let e = rt0.transpose() * rt1;
    let phi = log_so3_unchecked(&e);
    let jinv = right_jacobian_inv(&phi);
    let mut gyro = Residual::new(DVector::from_column_slice((meas.gyro - phi / h1 - bias.gyro).as_slice()));
    let d1 = -jinv * rhat[1].transpose() * right_jacobian(&ic[1].rot) / h1;
    let d0 = jinv * e.transpose() * rhat[0].transpose() * right_jacobian(&ic[0].rot) / h1;
    for (icj, d) in [(&ic[0], d0), (&ic[1], d1)] {
        let mut j = Matrix3x6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&d);
        add_interpolated(&mut gyro, icj, &j);
    }
    let mut jb = DMatrix::zeros(3, 6);
    jb.view_mut((0, 0), (3, 3)).copy_from(&-Mat3::identity());
    gyro.add(Var::Bias, jb);

    // accelerometer: R̃₀(a − b_a) − â + g with a three-point second difference
    let c = [2.0 / (h1 * (h1 + h2)), -2.0 / (h1 * h2), 2.0 / (h2 * (h1 + h2))];
    let mut acc_hat = Vec3::zeros();
    for j in 0..3 {
        acc_hat += (ic[j].trans + win.poses[k + j].translation) * c[j];
    }
    let v = meas.accel - bias.accel;
    let mut accel = Residual::new(DVector::from_column_slice((rt0 * v - acc_hat + win.gravity).as_slice()));
    let mut j0 = Matrix3x6::zeros();
    j0.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rt0 * hat(&v) * rhat[0].transpose() * right_jacobian(&ic[0].rot)));
    add_interpolated(&mut accel, &ic[0], &j0);
    for j in 0..3 {
        let mut jt = Matrix3x6::zeros();
        jt.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Mat3::identity() * c[j]));
        add_interpolated(&mut accel, &ic[j], &jt);
    }
    let mut jb = DMatrix::zeros(3, 6);
    jb.view_mut((0, 3), (3, 3)).copy_from(&-rt0);
    accel.add(Var::Bias, jb);

    // bias anchor to the previous estimate
    let mut bias_res = Residual::new(DVector::zeros(6));
    let bg = weights.bias_gyro * (bias.gyro - bias_prior.gyro);
    let ba = weights.bias_accel * (bias.accel - bias_prior.accel);
    bias_res.value.rows_mut(0, 3).copy_from(&bg);
    bias_res.value.rows_mut(3, 3).copy_from(&ba);
    let mut jb = DMatrix::zeros(6, 6);
    jb.view_mut((0, 0), (3, 3)).copy_from(&weights.bias_gyro);
    jb.view_mut((3, 3), (3, 3)).copy_from(&weights.bias_accel);
    bias_res.add(Var::Bias, jb);

    Ok(Some(ImuResiduals { gyro: gyro.whiten(&weights.gyro), accel: accel.whiten(&weights.accel), bias: bias_res }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::log_so3;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rv(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    fn samples(n: usize, dt: f64) -> Vec<f64> {
        (0..n).map(|i| i as f64 * dt).collect()
    }

    #[test]
    fn interp_examples() {
        let times = samples(3, 0.1);
        let c = vec![
            CorrectionPose::new(Vec3::new(0.01, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)),
            CorrectionPose::new(Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0)),
            CorrectionPose::new(Vec3::zeros(), Vec3::zeros()),
        ];
        let ic = interp_correction(&c, &times, 0.0).unwrap();
        assert_eq!((ic.rot, ic.trans), (c[0].rot_vec, c[0].trans));
        let ic = interp_correction(&c, &times, 0.05).unwrap();
        assert!((ic.trans - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
        let ic = interp_correction(&c, &times, 0.2).unwrap();
        assert_eq!((ic.a, ic.b, ic.alpha), (1, 2, 1.0));
        assert!(interp_correction(&c, &times, 0.21).is_err());
        assert!(interp_correction(&c, &times, -0.01).is_err());
    }

    #[test]
    fn interp_piecewise_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let times = samples(5, 0.1);
        let c: Vec<_> = (0..5).map(|_| CorrectionPose::new(rv(&mut rng, 0.1), rv(&mut rng, 1.0))).collect();
        for (t0, h) in [(0.11, 0.02), (0.3, 0.03)] {
            let f = |t: f64| interp_correction(&c, &times, t).unwrap().trans;
            let dd = f(t0 + 2.0 * h) - 2.0 * f(t0 + h) + f(t0);
            assert!(dd.norm() < 1e-12);
        }
    }

    /// Central-difference Jacobian over all correction and bias coordinates.
    fn numeric_jacobian(
        f: &dyn Fn(&[CorrectionPose], &ImuBias) -> DVector<f64>,
        c: &[CorrectionPose],
        b: &ImuBias,
    ) -> DMatrix<f64> {
        let n = c.len();
        let m = f(c, b).len();
        let h = 1e-6;
        let mut out = DMatrix::zeros(m, 6 * n + 6);
        for col in 0..6 * n + 6 {
            let mut cp = c.to_vec();
            let mut cm = c.to_vec();
            let mut bp = *b;
            let mut bm = *b;
            if col < 6 * n {
                let (i, k) = (col / 6, col % 6);
                let bump = |cc: &mut CorrectionPose, d: f64| {
                    if k < 3 {
                        cc.rot_vec[k] += d
                    } else {
                        cc.trans[k - 3] += d
                    }
                };
                bump(&mut cp[i], h);
                bump(&mut cm[i], -h);
            } else {
                let k = col - 6 * n;
                let bump = |bb: &mut ImuBias, d: f64| {
                    if k < 3 {
                        bb.gyro[k] += d
                    } else {
                        bb.accel[k - 3] += d
                    }
                };
                bump(&mut bp, h);
                bump(&mut bm, -h);
            }
            out.set_column(col, &((f(&cp, &bp) - f(&cm, &bm)) / (2.0 * h)));
        }
        out
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-3)
    }

    #[test]
    fn surfel_residual_examples() {
        let times = samples(4, 0.1);
        let zero = vec![CorrectionPose::zero(); 4];
        let n = Vec3::new(0.0, 0.0, 1.0);
        let s = MatchSide { position: Vec3::new(1.0, 2.0, 0.5), pivot: Vec3::zeros(), time: 0.05 };
        let r = surfel_match_residual(&n, 4.0, &s, &s, &zero, &times).unwrap();
        assert_eq!(r.value[0], 0.0);
        let s2 = MatchSide { position: s.position + n * 0.3, time: 0.25, ..s };
        let r = surfel_match_residual(&n, 4.0, &s, &s2, &zero, &times).unwrap();
        assert!((r.value[0] - 0.6).abs() < 1e-15);
        let swapped = surfel_match_residual(&n, 4.0, &s2, &s, &zero, &times).unwrap();
        assert_eq!(swapped.value[0], -r.value[0]);
    }

    #[test]
    fn surfel_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let times = samples(6, 0.1);
        for _ in 0..100 {
            let c: Vec<_> = (0..6).map(|_| CorrectionPose::new(rv(&mut rng, 0.2), rv(&mut rng, 0.5))).collect();
            let n = rv(&mut rng, 1.0).normalize();
            let s = MatchSide { position: rv(&mut rng, 10.0), pivot: rv(&mut rng, 10.0), time: rng.random_range(0.0..0.5) };
            let s2 = MatchSide { position: rv(&mut rng, 10.0), pivot: rv(&mut rng, 10.0), time: rng.random_range(0.0..0.5) };
            let w = rng.random_range(0.5..50.0);
            let f = |cc: &[CorrectionPose], _: &ImuBias| surfel_match_residual(&n, w, &s, &s2, cc, &times).unwrap().value;
            let num = numeric_jacobian(&f, &c, &ImuBias::default());
            let ana = surfel_match_residual(&n, w, &s, &s2, &c, &times).unwrap().dense_jacobian(6);
            assert!(rel_err(&ana, &num) < 1e-5, "{}", rel_err(&ana, &num));
        }
    }

    fn weights() -> ImuWeights {
        let d = |s: f64| Mat3::identity() * s * s;
        ImuWeights::from_covariances(&d(0.01), &d(0.05), &d(0.001), &d(0.01)).unwrap()
    }

    fn random_window(rng: &mut ChaCha8Rng, m: usize) -> (Vec<f64>, Vec<Pose>, Vec<ImuSample>) {
        let mut t = 0.0;
        let mut times = Vec::new();
        let mut poses = Vec::new();
        let mut imu = Vec::new();
        for _ in 0..m {
            times.push(t);
            poses.push(Pose::from_parts(&rv(rng, 1.0), rv(rng, 5.0)));
            imu.push(ImuSample { time: t, gyro: rv(rng, 1.0), accel: rv(rng, 12.0) });
            t += rng.random_range(0.008..0.012);
        }
        (times, poses, imu)
    }

    #[test]
    fn imu_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = weights();
        for _ in 0..100 {
            let (times, poses, imu) = random_window(&mut rng, 12);
            // smooth-ish neighbouring rotations keep log away from π
            let poses: Vec<Pose> = poses
                .iter()
                .enumerate()
                .map(|(i, p)| Pose::new(exp_so3(&(Vec3::new(0.1, -0.2, 0.3) * i as f64 * 0.1)) * exp_so3(&(log_so3(&p.rotation).unwrap() * 0.05)), p.translation))
                .collect();
            let st: Vec<f64> = (0..4).map(|i| times[0] + (times[11] - times[0]) * i as f64 / 3.0).collect();
            let c: Vec<_> = (0..4).map(|_| CorrectionPose::new(rv(&mut rng, 0.1), rv(&mut rng, 0.3))).collect();
            let b = ImuBias { gyro: rv(&mut rng, 0.05), accel: rv(&mut rng, 0.2) };
            let prior = ImuBias { gyro: rv(&mut rng, 0.05), accel: rv(&mut rng, 0.2) };
            let k = rng.random_range(0..10);
            let win = ImuWindow { times: &times, poses: &poses, samples: &imu, gravity: Vec3::new(0.0, 0.0, -9.80665) };
            let eval = |cc: &[CorrectionPose], bb: &ImuBias| imu_residuals(k, &win, cc, &st, bb, &prior, &w).unwrap().unwrap();
            let r = eval(&c, &b);
            for (which, ana) in [(0, &r.gyro), (1, &r.accel), (2, &r.bias)] {
                let f = |cc: &[CorrectionPose], bb: &ImuBias| {
                    let rr = eval(cc, bb);
                    [rr.gyro, rr.accel, rr.bias][which].value.clone()
                };
                let num = numeric_jacobian(&f, &c, &b);
                let err = rel_err(&ana.dense_jacobian(4), &num);
                assert!(err < 1e-5, "family {which}: {err}");
            }
        }
    }

    #[test]
    fn imu_residuals_at_equilibrium() {
        let g = Vec3::new(0.0, 0.0, -9.80665);
        let times = samples(5, 0.01);
        let tilt = exp_so3(&Vec3::new(0.1, -0.05, 0.7));
        let poses = vec![Pose::new(tilt, Vec3::new(1.0, 2.0, 3.0)); 5];
        let imu: Vec<_> = times.iter().map(|&t| ImuSample { time: t, gyro: Vec3::zeros(), accel: -tilt.transpose() * g }).collect();
        let win = ImuWindow { times: &times, poses: &poses, samples: &imu, gravity: g };
        let c = vec![CorrectionPose::zero(); 5];
        let b = ImuBias::default();
        let r = imu_residuals(1, &win, &c, &times, &b, &b, &weights()).unwrap().unwrap();
        assert!(r.accel.value.norm() < 1e-9);
        assert!(r.gyro.value.norm() < 1e-12);
        assert_eq!(r.bias.value.norm(), 0.0);
        assert!(imu_residuals(3, &win, &c, &times, &b, &b, &weights()).unwrap().is_none());
    }

    #[test]
    fn gyro_residual_first_order_in_dt() {
        // constant body rate plus a slowly varying term; residual shrinks linearly with Δt
        let w0 = Vec3::new(0.3, -0.2, 0.5);
        let rot = |t: f64| exp_so3(&(w0 * t)) * exp_so3(&Vec3::new(0.2 * t * t, 0.0, 0.0));
        let omega = |t: f64| {
            let h = 1e-6;
            vee_fd(&rot(t), &rot(t + h), h)
        };
        let mut errs = Vec::new();
        for dt in [0.02, 0.01, 0.005] {
            let times = samples(4, dt);
            let poses: Vec<_> = times.iter().map(|&t| Pose::from_rotation(rot(t))).collect();
            let imu: Vec<_> = times
                .iter()
                .map(|&t| ImuSample { time: t, gyro: omega(t), accel: -rot(t).transpose() * Vec3::new(0.0, 0.0, -9.80665) })
                .collect();
            let win = ImuWindow { times: &times, poses: &poses, samples: &imu, gravity: Vec3::new(0.0, 0.0, -9.80665) };
            let c = vec![CorrectionPose::zero(); 4];
            let b = ImuBias::default();
            let w = ImuWeights::from_covariances(&Mat3::identity(), &Mat3::identity(), &Mat3::identity(), &Mat3::identity()).unwrap();
            let r = imu_residuals(0, &win, &c, &times, &b, &b, &w).unwrap().unwrap();
            errs.push(r.gyro.value.norm());
        }
        for k in 0..2 {
            let ratio = errs[k] / errs[k + 1];
            assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio} ({errs:?})");
        }
    }

    fn vee_fd(a: &Mat3, b: &Mat3, h: f64) -> Vec3 {
        log_so3(&(a.transpose() * b)).unwrap() / h
    }

    #[test]
    fn whitening_scales_cost() {
        let times = samples(4, 0.01);
        let poses = vec![Pose::identity(); 4];
        let imu: Vec<_> = times.iter().map(|&t| ImuSample { time: t, gyro: Vec3::zeros(), accel: Vec3::new(0.0, 0.3, 9.80665) }).collect();
        let win = ImuWindow { times: &times, poses: &poses, samples: &imu, gravity: Vec3::new(0.0, 0.0, -9.80665) };
        let c = vec![CorrectionPose::zero(); 4];
        let b = ImuBias::default();
        let id = Mat3::identity();
        let w1 = ImuWeights::from_covariances(&id, &id, &id, &id).unwrap();
        let w2 = ImuWeights::from_covariances(&id, &(id * 2.0), &id, &id).unwrap();
        let c1 = imu_residuals(0, &win, &c, &times, &b, &b, &w1).unwrap().unwrap().accel.cost();
        let c2 = imu_residuals(0, &win, &c, &times, &b, &b, &w2).unwrap().unwrap().accel.cost();
        assert!((c1 / c2 - 2.0).abs() < 1e-12);
    }
}
