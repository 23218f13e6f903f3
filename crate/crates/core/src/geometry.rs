//! Rigid-body primitives on SO(3) x R^3 and cumulative cubic B-spline pose curves.
//!
//! Rotations are plain 3x3 matrices. Tangent vectors are ordered `[rotation; translation]`
//! wherever a 6-vector is used.

use nalgebra::{Matrix3, Matrix6, Quaternion, SVector, UnitQuaternion, Vector3, Vector6};
use std::ops::Mul;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Orthonormality residual above which a matrix is not accepted as a rotation.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not a rotation (orthonormality residual {0:.3e})")]
    NotOrthonormal(f64),
    #[error("rotation angle too close to pi for a principal logarithm (trace {0})")]
    NearPi(f64),
    #[error("time {t} outside spline support [{lo}, {hi}]")]
    OutOfSupport { t: f64, lo: f64, hi: f64 },
    #[error("spline needs at least 4 control poses, got {0}")]
    TooFewControls(usize),
    #[error("knot times must be ascending and uniformly spaced")]
    NonUniformKnots,
    #[error("knot and control counts differ ({knots} vs {controls})")]
    LengthMismatch { knots: usize, controls: usize },
}

pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues' formula.
pub fn exp_so3(v: &Vec3) -> Mat3 {
    let theta2 = v.norm_squared();
    let k = hat(v);
    let (a, b) = if theta2 < SMALL_ANGLE * SMALL_ANGLE * 1e4 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k * k * b
}

pub fn orthonormality_residual(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).norm()
}

/// Principal logarithm, `‖result‖ ≤ π`. Rejects non-rotations and angles at π.
pub fn log_so3(r: &Mat3) -> Result<Vec3, GeometryError> {
    let res = orthonormality_residual(r);
    if res > ORTHONORMAL_TOL || r.determinant() < 0.0 {
        return Err(GeometryError::NotOrthonormal(res));
    }
    let tr = r.trace();
    if tr <= -1.0 + 1e-12 {
        return Err(GeometryError::NearPi(tr));
    }
    Ok(log_so3_unchecked(r))
}

/// Logarithm without validation; callers guarantee a proper rotation away from π.
pub fn log_so3_unchecked(r: &Mat3) -> Vec3 {
    let w = 0.5 * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = w.norm();
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    if c > -0.9 {
        let theta = s.atan2(c);
        if s < SMALL_ANGLE {
            // theta/sin(theta) ~ 1 + theta^2/6
            return w * (1.0 + theta * theta / 6.0);
        }
        return w * (theta / s);
    }
    // Near pi the antisymmetric part is ill-conditioned; recover the axis from the symmetric part.
    let theta = s.atan2(c);
    let b = (r + r.transpose()) * 0.5 - Mat3::identity() * c;
    let diag = Vec3::new(b[(0, 0)], b[(1, 1)], b[(2, 2)]);
    let k = diag.imax();
    let mut axis: Vec3 = b.column(k).into();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Right Jacobian of SO(3): `exp(φ + δ) ≈ exp(φ) exp(J_r(φ) δ)`.
pub fn right_jacobian(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    if theta2 < 1e-10 {
        return Mat3::identity() - k * 0.5 + k * k / 6.0;
    }
    let theta = theta2.sqrt();
    Mat3::identity() - k * ((1.0 - theta.cos()) / theta2) + k * k * ((theta - theta.sin()) / (theta2 * theta))
}

pub fn right_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    if theta2 < 1e-10 {
        return Mat3::identity() + k * 0.5 + k * k / 12.0;
    }
    let theta = theta2.sqrt();
    let coeff = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Mat3::identity() + k * 0.5 + k * k * coeff
}

/// Re-orthonormalises a rotation that has picked up round-off drift.
pub fn orthonormalize(r: &Mat3) -> Mat3 {
    let q = UnitQuaternion::from_matrix_eps(r, 1e-15, 32, UnitQuaternion::identity());
    q.to_rotation_matrix().into_inner()
}

/// `α·x + (1 − α)·y`; the weight applies to the first argument.
pub fn lin_interpolate<const D: usize>(x: &SVector<f64, D>, y: &SVector<f64, D>, alpha: f64) -> SVector<f64, D> {
    x * alpha + y * (1.0 - alpha)
}

/// Interpolation of small correction rotations, linear in axis-angle coordinates.
pub fn rot_interpolate(ra: &Vec3, rb: &Vec3, alpha: f64) -> Vec3 {
    const LIMIT: f64 = 0.5;
    if ra.norm() > LIMIT || rb.norm() > LIMIT {
        log::warn!(
            "rotation interpolation on large rotations ({:.3}, {:.3} rad); linear approximation degrades",
            ra.norm(),
            rb.norm()
        );
    }
    lin_interpolate(ra, rb, alpha)
}

/// Rotation + translation pair. Composition is the SE(3) product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: Mat3::identity(), translation: t }
    }

    pub fn from_rotation(r: Mat3) -> Self {
        Self { rotation: r, translation: Vec3::zeros() }
    }

    pub fn from_parts(rot_vec: &Vec3, translation: Vec3) -> Self {
        Self { rotation: exp_so3(rot_vec), translation }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self⁻¹ · other`
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Right retraction used by the back end: `(R·exp(φ), t + R·ρ)` for `δ = [φ; ρ]`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let phi = delta.fixed_rows::<3>(0).into_owned();
        let rho = delta.fixed_rows::<3>(3).into_owned();
        Pose {
            rotation: self.rotation * exp_so3(&phi),
            translation: self.translation + self.rotation * rho,
        }
    }

    /// `[log R; t]`, the inverse of the direct-product exponential.
    pub fn log_parts(&self) -> Vector6<f64> {
        let mut out = Vector6::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&log_so3_unchecked(&self.rotation));
        out.fixed_rows_mut::<3>(3).copy_from(&self.translation);
        out
    }

    /// Adjoint for the `[φ; ρ]` ordering: `T·exp(ξ)·T⁻¹ = exp(Ad_T ξ)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        let r = self.rotation;
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&(hat(&self.translation) * r));
        ad
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix_eps(&self.rotation, 1e-15, 64, UnitQuaternion::identity())
    }

    /// Builds a pose from a translation and a (possibly unnormalised) quaternion `(x, y, z, w)`.
    pub fn from_quaternion(t: Vec3, qx: f64, qy: f64, qz: f64, qw: f64) -> Pose {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        Pose { rotation: q.to_rotation_matrix().into_inner(), translation: t }
    }

    pub fn rotation_angle(&self) -> f64 {
        log_so3_unchecked(&self.rotation).norm()
    }

    pub fn normalized(&self) -> Pose {
        Pose { rotation: orthonormalize(&self.rotation), translation: self.translation }
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;
    fn mul(self, rhs: &'a Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Element of so(3) x R^3.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TangentPose {
    pub rot_vec: Vec3,
    pub trans: Vec3,
}

impl TangentPose {
    pub fn new(rot_vec: Vec3, trans: Vec3) -> Self {
        Self { rot_vec, trans }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.rot_vec.x, self.rot_vec.y, self.rot_vec.z, self.trans.x, self.trans.y, self.trans.z)
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self { rot_vec: v.fixed_rows::<3>(0).into_owned(), trans: v.fixed_rows::<3>(3).into_owned() }
    }
}

/// Uniform cubic B-spline basis at `u ∈ [0, 1]` for controls `i−1 .. i+2`.
pub fn bspline_basis(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        (1.0 - u).powi(3) / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

/// Cumulative basis `B̃_j(u) = Σ_{k≥j} B_k(u)` for `j = 1..3`.
pub fn bspline_cumulative_basis(u: f64) -> [f64; 3] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        (5.0 + 3.0 * u - 3.0 * u2 + u3) / 6.0,
        (1.0 + 3.0 * u + 3.0 * u2 - 2.0 * u3) / 6.0,
        u3 / 6.0,
    ]
}

/// Approximating cumulative cubic B-spline through uniformly spaced control poses.
#[derive(Debug, Clone)]
pub struct PoseSpline {
    knot_times: Vec<f64>,
    control_poses: Vec<Pose>,
    /// `log(R_{j-1}ᵀ R_j)` for j ≥ 1, cached at construction.
    increments: Vec<Vec3>,
    spacing: f64,
}

impl PoseSpline {
    pub fn new(knot_times: Vec<f64>, control_poses: Vec<Pose>) -> Result<Self, GeometryError> {
        if knot_times.len() != control_poses.len() {
            return Err(GeometryError::LengthMismatch { knots: knot_times.len(), controls: control_poses.len() });
        }
        if control_poses.len() < 4 {
            return Err(GeometryError::TooFewControls(control_poses.len()));
        }
        let spacing = knot_times[1] - knot_times[0];
        if !(spacing > 0.0) {
            return Err(GeometryError::NonUniformKnots);
        }
        for w in knot_times.windows(2) {
            if ((w[1] - w[0]) - spacing).abs() > 1e-9 * spacing.max(w[1].abs()) {
                return Err(GeometryError::NonUniformKnots);
            }
        }
        let mut increments = Vec::with_capacity(control_poses.len());
        increments.push(Vec3::zeros());
        for w in control_poses.windows(2) {
            increments.push(log_so3(&(w[0].rotation.transpose() * w[1].rotation))?);
        }
        Ok(Self { knot_times, control_poses, increments, spacing })
    }

    pub fn knot_times(&self) -> &[f64] {
        &self.knot_times
    }

    pub fn control_poses(&self) -> &[Pose] {
        &self.control_poses
    }

    /// Valid evaluation interval `[t_1, t_{n−2}]`.
    pub fn support(&self) -> (f64, f64) {
        let n = self.knot_times.len();
        (self.knot_times[1], self.knot_times[n - 2])
    }

    pub fn eval(&self, t: f64) -> Result<Pose, GeometryError> {
        let (lo, hi) = self.support();
        let tol = 1e-9 * self.spacing;
        if t < lo - tol || t > hi + tol {
            return Err(GeometryError::OutOfSupport { t, lo, hi });
        }
        let n = self.knot_times.len();
        let rel = (t - self.knot_times[0]) / self.spacing;
        let seg = (rel.floor() as isize).clamp(1, n as isize - 3) as usize;
        let u = (rel - seg as f64).clamp(0.0, 1.0);

        let b = bspline_basis(u);
        let mut translation = Vec3::zeros();
        for (j, bj) in b.iter().enumerate() {
            translation += self.control_poses[seg - 1 + j].translation * *bj;
        }

        let cb = bspline_cumulative_basis(u);
        let mut rotation = self.control_poses[seg - 1].rotation;
        for j in 0..3 {
            rotation *= exp_so3(&(self.increments[seg + j] * cb[j]));
        }
        Ok(Pose { rotation, translation })
    }

    /// Evaluates after clamping `t` into the support interval.
    pub fn eval_clamped(&self, t: f64) -> Pose {
        let (lo, hi) = self.support();
        self.eval(t.clamp(lo, hi)).expect("clamped time lies in support")
    }
}
