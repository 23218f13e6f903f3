//! Deterministic synthetic sensor data with exact ground truth.
//!
//! Worlds are sets of bounded planar rectangles. Trajectories are analytic planar curves
//! with a smooth start from rest; every quantity the IMU needs is evaluated in closed form.

use crate::geometry::{exp_so3, hat, vee, Mat3, Pose, Vec3};
use crate::odometry::ImuSample;
use crate::surfel::LidarPoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;
use std::cell::RefCell;
use thiserror::Error;

/// Standard gravity in the world frame (z up).
pub const GRAVITY: Vec3 = Vec3::new(0.0, 0.0, -9.80665);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("time {t} outside trajectory range [0, {duration}]")]
    OutOfRange { t: f64, duration: f64 },
    #[error("invalid simulator parameter: {0}")]
    InvalidParameter(String),
}

/// Bounded rectangle `center + a·u + b·v` with `|a| ≤ half_u`, `|b| ≤ half_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center: Vec3,
    pub normal: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    pub half_u: f64,
    pub half_v: f64,
}

impl Patch {
    pub fn new(center: Vec3, normal: Vec3, u: Vec3, half_u: f64, half_v: f64) -> Self {
        let normal = normal.normalize();
        let u = (u - normal * u.dot(&normal)).normalize();
        let v = normal.cross(&u);
        Self { center, normal, u, v, half_u, half_v }
    }

    /// Ray parameter of the hit, if any.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = self.normal.dot(&(self.center - origin)) / denom;
        if s <= 0.0 {
            return None;
        }
        let d = origin + dir * s - self.center;
        (d.dot(&self.u).abs() <= self.half_u && d.dot(&self.v).abs() <= self.half_v).then_some(s)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct World {
    pub patches: Vec<Patch>,
}

impl World {
    pub fn add_patch(&mut self, p: Patch) {
        self.patches.push(p);
    }

    /// Adds the six faces of an axis-aligned box.
    pub fn add_box(&mut self, min: Vec3, max: Vec3) {
        let c = (min + max) * 0.5;
        let h = (max - min) * 0.5;
        assert!(h.x > 0.0 && h.y > 0.0 && h.z > 0.0, "box extents must be positive");
        for (axis, sign) in [(0usize, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0), (2, -1.0)] {
            let mut n = Vec3::zeros();
            n[axis] = sign;
            let ua = (axis + 1) % 3;
            let va = (axis + 2) % 3;
            let mut u = Vec3::zeros();
            u[ua] = 1.0;
            let mut center = c;
            center[axis] += sign * h[axis];
            let mut p = Patch::new(center, n, u, h[ua], h[va]);
            // keep v aligned with the remaining axis regardless of handedness
            p.half_v = h[va];
            self.patches.push(p);
        }
    }

    /// Grid samples over every patch at roughly `spacing`, for reference clouds.
    pub fn sample_surface(&self, spacing: f64) -> Vec<Vec3> {
        let mut out = Vec::new();
        for p in &self.patches {
            let nu = ((2.0 * p.half_u / spacing).ceil() as usize).max(1);
            let nv = ((2.0 * p.half_v / spacing).ceil() as usize).max(1);
            for i in 0..=nu {
                for j in 0..=nv {
                    let a = -p.half_u + 2.0 * p.half_u * i as f64 / nu as f64;
                    let b = -p.half_v + 2.0 * p.half_v * j as f64 / nv as f64;
                    out.push(p.center + p.u * a + p.v * b);
                }
            }
        }
        out
    }

    /// Closest hit along a unit ray within `(min_range, max_range)`.
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3, min_range: f64, max_range: f64) -> Option<f64> {
        let mut best = max_range;
        let mut hit = false;
        for p in &self.patches {
            if let Some(s) = p.intersect(origin, dir) {
                if s > min_range && s < best {
                    best = s;
                    hit = true;
                }
            }
        }
        hit.then_some(best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Room,
    Corridor,
    Tunnel,
    TwoRoomLoop,
}

impl SceneKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "room" => Some(Self::Room),
            "corridor" => Some(Self::Corridor),
            "tunnel" => Some(Self::Tunnel),
            "two-room-loop" | "loop" => Some(Self::TwoRoomLoop),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Room => "room",
            Self::Corridor => "corridor",
            Self::Tunnel => "tunnel",
            Self::TwoRoomLoop => "two-room-loop",
        }
    }
}

/// Walls, floor and ceiling of an axis-aligned room seen from the inside.
fn add_shell(w: &mut World, min: Vec3, max: Vec3, skip_x_ends: bool) {
    let c = (min + max) * 0.5;
    let h = (max - min) * 0.5;
    w.add_patch(Patch::new(Vec3::new(c.x, c.y, min.z), Vec3::z(), Vec3::x(), h.x, h.y));
    w.add_patch(Patch::new(Vec3::new(c.x, c.y, max.z), -Vec3::z(), Vec3::x(), h.x, h.y));
    w.add_patch(Patch::new(Vec3::new(c.x, min.y, c.z), Vec3::y(), Vec3::x(), h.x, h.z));
    w.add_patch(Patch::new(Vec3::new(c.x, max.y, c.z), -Vec3::y(), Vec3::x(), h.x, h.z));
    if !skip_x_ends {
        w.add_patch(Patch::new(Vec3::new(min.x, c.y, c.z), Vec3::x(), Vec3::y(), h.y, h.z));
        w.add_patch(Patch::new(Vec3::new(max.x, c.y, c.z), -Vec3::x(), Vec3::y(), h.y, h.z));
    }
}

pub fn build_scene(kind: SceneKind) -> World {
    let mut w = World::default();
    match kind {
        SceneKind::Room => {
            add_shell(&mut w, Vec3::zeros(), Vec3::new(10.0, 8.0, 3.0), false);
            // no piece of furniture has a counterpart under the half turn about the room centre
            w.add_box(Vec3::new(1.0, 6.0, 0.0), Vec3::new(2.5, 7.5, 1.2));
            w.add_box(Vec3::new(3.5, 0.3, 0.0), Vec3::new(5.0, 1.0, 0.8));
            w.add_box(Vec3::new(3.8, 3.6, 0.0), Vec3::new(4.6, 4.8, 1.5));
            w.add_box(Vec3::new(6.0, 7.4, 0.0), Vec3::new(8.0, 8.0, 2.0));
            w.add_box(Vec3::new(8.6, 6.6, 0.0), Vec3::new(9.0, 7.0, 3.0));
            w.add_box(Vec3::new(0.0, 2.0, 0.9), Vec3::new(0.4, 3.5, 2.2));
        }
        SceneKind::Corridor => {
            add_shell(&mut w, Vec3::zeros(), Vec3::new(40.0, 2.6, 2.8), false);
            for k in 0..10 {
                let x = 3.0 + 4.0 * k as f64;
                w.add_box(Vec3::new(x, 0.0, 0.0), Vec3::new(x + 0.4, 0.3, 2.8));
                let x2 = x + 2.0;
                w.add_box(Vec3::new(x2, 2.3, 0.0), Vec3::new(x2 + 0.6, 2.6, 1.0 + 0.1 * k as f64));
            }
        }
        SceneKind::Tunnel => {
            add_shell(&mut w, Vec3::new(-20.0, 0.0, 0.0), Vec3::new(80.0, 3.0, 3.0), true);
        }
        SceneKind::TwoRoomLoop => {
            add_shell(&mut w, Vec3::zeros(), Vec3::new(24.0, 12.0, 3.0), false);
            // dividing wall with two doorways
            let (x0, x1) = (11.9, 12.1);
            w.add_box(Vec3::new(x0, 0.0, 0.0), Vec3::new(x1, 1.8, 3.0));
            w.add_box(Vec3::new(x0, 4.2, 0.0), Vec3::new(x1, 7.8, 3.0));
            w.add_box(Vec3::new(x0, 10.2, 0.0), Vec3::new(x1, 12.0, 3.0));
            w.add_box(Vec3::new(x0, 1.8, 2.2), Vec3::new(x1, 4.2, 3.0));
            w.add_box(Vec3::new(x0, 7.8, 2.2), Vec3::new(x1, 10.2, 3.0));
            // furniture, deliberately asymmetric
            w.add_box(Vec3::new(1.0, 0.5, 0.0), Vec3::new(3.0, 1.5, 1.0));
            w.add_box(Vec3::new(5.5, 5.0, 0.0), Vec3::new(6.5, 6.8, 1.4));
            w.add_box(Vec3::new(2.0, 10.0, 0.0), Vec3::new(2.4, 10.4, 3.0));
            w.add_box(Vec3::new(17.0, 5.2, 0.0), Vec3::new(18.5, 6.4, 0.9));
            w.add_box(Vec3::new(21.0, 1.0, 0.0), Vec3::new(23.5, 2.0, 1.8));
            w.add_box(Vec3::new(15.0, 10.6, 0.0), Vec3::new(16.0, 11.6, 2.0));
            w.add_box(Vec3::new(23.6, 7.0, 0.8), Vec3::new(24.0, 9.0, 2.0));
        }
    }
    w
}

/// Planar curve families; all are regular (nonzero tangent).
#[derive(Debug, Clone, PartialEq)]
pub enum CurveKind {
    /// Straight line along +x of the trajectory frame.
    Line,
    /// Circle starting at the origin heading +x, turning left.
    Circle { radius: f64 },
    /// Ellipse `(a cos(θ+φ), b sin(θ+φ))` centred at the origin, counter-clockwise.
    Ellipse { semi_x: f64, semi_y: f64, phase: f64 },
    /// Lemniscate of Gerono `(A sin θ, A sin θ cos θ)`.
    Figure8 { size: f64 },
    /// Closed uniform cubic B-spline through the given control points (piecewise cubic, C²).
    Piecewise { controls: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub kind: CurveKind,
    /// Nominal speed after the ramp (m/s).
    pub speed: f64,
    pub duration: f64,
    /// Length of the smooth start from rest (s); zero starts at full speed.
    pub ramp: f64,
    /// Planar placement of the curve frame: x, y, yaw.
    pub origin: (f64, f64, f64),
    pub height: f64,
    /// Vertical bob amplitude (m) and frequency (Hz); `A(1 − cos 2πft)`.
    pub bob: (f64, f64),
    /// Roll/pitch sway amplitude (rad) and frequency (Hz).
    pub sway: (f64, f64),
}

impl TrajectorySpec {
    pub fn new(kind: CurveKind, speed: f64, duration: f64) -> Self {
        Self { kind, speed, duration, ramp: 0.0, origin: (0.0, 0.0, 0.0), height: 0.0, bob: (0.0, 0.0), sway: (0.0, 0.0) }
    }

    pub fn stationary(duration: f64) -> Self {
        Self::new(CurveKind::Line, 0.0, duration)
    }

    pub fn with_ramp(mut self, ramp: f64) -> Self {
        self.ramp = ramp;
        self
    }

    pub fn with_origin(mut self, x: f64, y: f64, yaw: f64) -> Self {
        self.origin = (x, y, yaw);
        self
    }

    pub fn with_height(mut self, h: f64) -> Self {
        self.height = h;
        self
    }

    pub fn with_bob(mut self, amplitude: f64, freq: f64) -> Self {
        self.bob = (amplitude, freq);
        self
    }

    pub fn with_sway(mut self, amplitude: f64, freq: f64) -> Self {
        self.sway = (amplitude, freq);
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.duration > 0.0) || self.speed < 0.0 || self.ramp < 0.0 {
            return Err(SimError::InvalidParameter("duration must be positive, speed and ramp non-negative".into()));
        }
        match &self.kind {
            CurveKind::Circle { radius } if *radius <= 0.0 => Err(SimError::InvalidParameter("radius".into())),
            CurveKind::Ellipse { semi_x, semi_y, .. } if *semi_x <= 0.0 || *semi_y <= 0.0 => {
                Err(SimError::InvalidParameter("ellipse axes".into()))
            }
            CurveKind::Figure8 { size } if *size <= 0.0 => Err(SimError::InvalidParameter("figure-8 size".into())),
            CurveKind::Piecewise { controls } if controls.len() < 4 => {
                Err(SimError::InvalidParameter("piecewise curve needs at least 4 controls".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Ground-truth kinematic state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryState {
    pub pose: Pose,
    /// World-frame velocity and acceleration.
    pub velocity: Vec3,
    pub acceleration: Vec3,
    /// Body-frame angular velocity.
    pub angular_velocity: Vec3,
}

/// Curve point and its first two derivatives with respect to θ.
fn curve(kind: &CurveKind, theta: f64) -> ([f64; 2], [f64; 2], [f64; 2]) {
    match kind {
        CurveKind::Line => ([theta, 0.0], [1.0, 0.0], [0.0, 0.0]),
        CurveKind::Circle { radius: r } => {
            let (s, c) = theta.sin_cos();
            ([r * s, r * (1.0 - c)], [r * c, r * s], [-r * s, r * c])
        }
        CurveKind::Ellipse { semi_x: a, semi_y: b, phase } => {
            let (s, c) = (theta + phase).sin_cos();
            ([a * c, b * s], [-a * s, b * c], [-a * c, -b * s])
        }
        CurveKind::Figure8 { size: a } => {
            let (s, c) = theta.sin_cos();
            let (s2, c2) = (2.0 * theta).sin_cos();
            ([a * s, 0.5 * a * s2], [a * c, a * c2], [-a * s, -2.0 * a * s2])
        }
        CurveKind::Piecewise { controls } => {
            let n = controls.len();
            let seg = theta.floor();
            let u = theta - seg;
            let i = (seg as i64).rem_euclid(n as i64) as usize;
            let p = |k: isize| controls[((i as isize + k).rem_euclid(n as isize)) as usize];
            let u2 = u * u;
            let u3 = u2 * u;
            let b = [(1.0 - u).powi(3) / 6.0, (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0, (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0, u3 / 6.0];
            let db = [-(1.0 - u).powi(2) / 2.0, (9.0 * u2 - 12.0 * u) / 6.0, (-9.0 * u2 + 6.0 * u + 3.0) / 6.0, u2 / 2.0];
            let ddb = [1.0 - u, 3.0 * u - 2.0, -3.0 * u + 1.0, u];
            let mut out = ([0.0; 2], [0.0; 2], [0.0; 2]);
            for k in 0..4 {
                let c = p(k as isize - 1);
                out.0[0] += b[k] * c.0;
                out.0[1] += b[k] * c.1;
                out.1[0] += db[k] * c.0;
                out.1[1] += db[k] * c.1;
                out.2[0] += ddb[k] * c.0;
                out.2[1] += ddb[k] * c.1;
            }
            out
        }
    }
}

thread_local! {
    static PARAM_SPEED_MEMO: RefCell<Option<(CurveKind, f64)>> = const { RefCell::new(None) };
}

/// Mean |dc/dθ| over one period, memoised for the most recent curve.
fn mean_param_speed(kind: &CurveKind) -> f64 {
    PARAM_SPEED_MEMO.with(|m| {
        if let Some((k, v)) = m.borrow().as_ref() {
            if k == kind {
                return *v;
            }
        }
        let v = integrate_param_speed(kind);
        *m.borrow_mut() = Some((kind.clone(), v));
        v
    })
}

/// Mean |dc/dθ| over one period, used to convert speed into a parameter rate.
fn integrate_param_speed(kind: &CurveKind) -> f64 {
    let (period, samples) = match kind {
        CurveKind::Line => return 1.0,
        CurveKind::Circle { radius } => return *radius,
        CurveKind::Piecewise { controls } => (controls.len() as f64, 4000 * controls.len()),
        _ => (2.0 * PI, 20_000),
    };
    let mut total = 0.0;
    for k in 0..samples {
        let th = period * (k as f64 + 0.5) / samples as f64;
        let d = curve(kind, th).1;
        total += (d[0] * d[0] + d[1] * d[1]).sqrt();
    }
    total / samples as f64
}

/// Arc-length-like progress `s(t)`, its rate and acceleration, with a smoothstep speed ramp.
fn progress(spec: &TrajectorySpec, t: f64) -> (f64, f64, f64) {
    let v = spec.speed;
    if spec.ramp <= 0.0 || t >= spec.ramp {
        let s0 = if spec.ramp > 0.0 { 0.5 * spec.ramp } else { 0.0 };
        let t0 = spec.ramp.max(0.0);
        return (v * (s0 + (t - t0)), v, 0.0);
    }
    let x = t / spec.ramp;
    let s = spec.ramp * (x.powi(3) - 0.5 * x.powi(4));
    let rate = 3.0 * x * x - 2.0 * x.powi(3);
    let acc = (6.0 * x - 6.0 * x * x) / spec.ramp;
    (v * s, v * rate, v * acc)
}

pub fn rot_x(a: f64) -> Mat3 {
    exp_so3(&Vec3::new(a, 0.0, 0.0))
}
pub fn rot_y(a: f64) -> Mat3 {
    exp_so3(&Vec3::new(0.0, a, 0.0))
}
pub fn rot_z(a: f64) -> Mat3 {
    exp_so3(&Vec3::new(0.0, 0.0, a))
}

pub fn eval_trajectory(spec: &TrajectorySpec, t: f64) -> Result<TrajectoryState, SimError> {
    if !(0.0..=spec.duration + 1e-9).contains(&t) {
        return Err(SimError::OutOfRange { t, duration: spec.duration });
    }
    let k = 1.0 / mean_param_speed(&spec.kind);
    let (s, sd, sdd) = progress(spec, t);
    let (theta, thd, thdd) = (s * k, sd * k, sdd * k);
    let (c, c1, c2) = curve(&spec.kind, theta);

    let (ox, oy, oyaw) = spec.origin;
    let (sy, cy) = oyaw.sin_cos();
    let rot2 = |v: [f64; 2]| [cy * v[0] - sy * v[1], sy * v[0] + cy * v[1]];
    let (c, c1, c2) = (rot2(c), rot2(c1), rot2(c2));

    let w2pi = 2.0 * PI;
    let (bob_a, bob_f) = spec.bob;
    let bw = w2pi * bob_f;
    let z = spec.height + bob_a * (1.0 - (bw * t).cos());
    let zd = bob_a * bw * (bw * t).sin();
    let zdd = bob_a * bw * bw * (bw * t).cos();

    let position = Vec3::new(ox + c[0], oy + c[1], z);
    let velocity = Vec3::new(c1[0] * thd, c1[1] * thd, zd);
    let acceleration = Vec3::new(c2[0] * thd * thd + c1[0] * thdd, c2[1] * thd * thd + c1[1] * thdd, zdd);

    // heading follows the geometric tangent, defined even at rest
    let yaw = c1[1].atan2(c1[0]);
    let tangent2 = c1[0] * c1[0] + c1[1] * c1[1];
    let yaw_rate = (c1[0] * c2[1] - c1[1] * c2[0]) / tangent2 * thd;

    let (sw_a, sw_f) = spec.sway;
    let sw = w2pi * sw_f;
    let roll = sw_a * (1.0 - (sw * t).cos());
    let roll_rate = sw_a * sw * (sw * t).sin();
    let pitch = 0.5 * sw_a * (1.0 - (0.7 * sw * t).cos());
    let pitch_rate = 0.5 * sw_a * 0.7 * sw * (0.7 * sw * t).sin();

    let (rz, ry, rx) = (rot_z(yaw), rot_y(pitch), rot_x(roll));
    let rotation = rz * ry * rx;
    let rdot = rz * hat(&Vec3::z()) * ry * rx * yaw_rate
        + rz * ry * hat(&Vec3::y()) * rx * pitch_rate
        + rz * ry * rx * hat(&Vec3::x()) * roll_rate;
    let angular_velocity = vee(&(rotation.transpose() * rdot));

    Ok(TrajectoryState { pose: Pose::new(rotation, position), velocity, acceleration, angular_velocity })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoise {
    pub gyro_sigma: f64,
    pub accel_sigma: f64,
    pub gyro_bias: Vec3,
    pub accel_bias: Vec3,
}

impl ImuNoise {
    pub fn none() -> Self {
        Self { gyro_sigma: 0.0, accel_sigma: 0.0, gyro_bias: Vec3::zeros(), accel_bias: Vec3::zeros() }
    }
}

/// `a = Rᵀ(a_w − g) + b_a + ε_a`, `ω = ω_body + b_ω + ε_ω` at each requested time.
pub fn simulate_imu(spec: &TrajectorySpec, times: &[f64], noise: &ImuNoise, seed: u64) -> Result<Vec<ImuSample>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g_noise = Normal::new(0.0, noise.gyro_sigma.max(0.0)).map_err(|e| SimError::InvalidParameter(e.to_string()))?;
    let a_noise = Normal::new(0.0, noise.accel_sigma.max(0.0)).map_err(|e| SimError::InvalidParameter(e.to_string()))?;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let st = eval_trajectory(spec, t)?;
        let mut accel = st.pose.rotation.transpose() * (st.acceleration - GRAVITY) + noise.accel_bias;
        let mut gyro = st.angular_velocity + noise.gyro_bias;
        if noise.accel_sigma > 0.0 {
            accel += Vec3::from_fn(|_, _| a_noise.sample(&mut rng));
        }
        if noise.gyro_sigma > 0.0 {
            gyro += Vec3::from_fn(|_, _| g_noise.sample(&mut rng));
        }
        out.push(ImuSample { time: t, gyro, accel });
    }
    Ok(out)
}

/// Uniform IMU grid `0, Δt, 2Δt, …` up to the duration.
pub fn imu_times(duration: f64, dt: f64) -> Vec<f64> {
    let n = (duration / dt + 1e-9).floor() as usize;
    (0..=n).map(|k| k as f64 * dt).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LidarKind {
    Flat,
    Spinning,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarModel {
    pub kind: LidarKind,
    /// Revolutions per second of the scanning head.
    pub rate_hz: f64,
    pub channels: usize,
    /// Azimuth steps per revolution.
    pub rays_per_revolution: usize,
    pub vertical_fov_deg: f64,
    pub spin_rate_hz: f64,
    pub spin_tilt_deg: f64,
    pub max_range: f64,
    pub min_range: f64,
    pub noise_sigma: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            kind: LidarKind::Flat,
            rate_hz: 10.0,
            channels: 16,
            rays_per_revolution: 180,
            vertical_fov_deg: 30.0,
            spin_rate_hz: 0.5,
            spin_tilt_deg: 45.0,
            max_range: 100.0,
            min_range: 0.3,
            noise_sigma: 0.0,
        }
    }
}

impl LidarModel {
    pub fn spinning() -> Self {
        Self { kind: LidarKind::Spinning, ..Self::default() }
    }

    /// Scanner orientation relative to the body at time `t`.
    pub fn mount(&self, t: f64) -> Mat3 {
        match self.kind {
            LidarKind::Flat => Mat3::identity(),
            LidarKind::Spinning => rot_z(2.0 * PI * self.spin_rate_hz * t) * rot_x(self.spin_tilt_deg.to_radians()),
        }
    }

    /// Unit ray directions of one azimuth step in the scanner frame.
    fn elevations(&self) -> Vec<f64> {
        let fov = self.vertical_fov_deg.to_radians();
        if self.channels == 1 {
            return vec![0.0];
        }
        (0..self.channels).map(|c| -0.5 * fov + fov * c as f64 / (self.channels - 1) as f64).collect()
    }
}

/// Casts every ray from the true pose at its own emission time; returns body-frame points.
pub fn simulate_lidar(world: &World, spec: &TrajectorySpec, model: &LidarModel, seed: u64) -> Result<Vec<LidarPoint>, SimError> {
    if model.rate_hz <= 0.0 || model.rays_per_revolution == 0 || model.channels == 0 {
        return Err(SimError::InvalidParameter("lidar model".into()));
    }
    let noise = Normal::new(0.0, model.noise_sigma.max(0.0)).map_err(|e| SimError::InvalidParameter(e.to_string()))?;
    let elev: Vec<(f64, f64)> = model.elevations().iter().map(|e| e.sin_cos()).collect();
    let step_dt = 1.0 / (model.rate_hz * model.rays_per_revolution as f64);
    let revolutions = (spec.duration * model.rate_hz).floor() as u64;
    let mut out = Vec::new();
    for rev in 0..revolutions {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(rev);
        for k in 0..model.rays_per_revolution {
            // first ray of each revolution fires one step after the revolution start
            let t = rev as f64 / model.rate_hz + (k + 1) as f64 * step_dt;
            if t > spec.duration {
                break;
            }
            let pose = eval_trajectory(spec, t)?.pose;
            let mount = model.mount(t);
            let (saz, caz) = (2.0 * PI * k as f64 / model.rays_per_revolution as f64).sin_cos();
            for &(se, ce) in &elev {
                let d_scanner = Vec3::new(ce * caz, ce * saz, se);
                let d_body = mount * d_scanner;
                let d_world = pose.rotation * d_body;
                if let Some(s) = world.raycast(&pose.translation, &d_world, model.min_range, model.max_range) {
                    let r = if model.noise_sigma > 0.0 { s + noise.sample(&mut rng) } else { s };
                    out.push(LidarPoint { time: t, position: d_body * r });
                }
            }
        }
    }
    Ok(out)
}

/// Ground truth sampled at the given times.
pub fn ground_truth(spec: &TrajectorySpec, times: &[f64]) -> Result<Vec<(f64, Pose)>, SimError> {
    times.iter().map(|&t| eval_trajectory(spec, t).map(|s| (t, s.pose))).collect()
}

/// Standard trajectory used with each scene by the tooling.
pub fn default_trajectory(scene: SceneKind, duration: Option<f64>) -> TrajectorySpec {
    match scene {
        SceneKind::Room => TrajectorySpec::new(CurveKind::Ellipse { semi_x: 3.0, semi_y: 2.0, phase: PI }, 0.8, duration.unwrap_or(30.0))
            .with_ramp(2.0)
            .with_origin(5.0, 4.0, 0.0)
            .with_height(1.1),
        SceneKind::Corridor => TrajectorySpec::new(CurveKind::Line, 1.0, duration.unwrap_or(30.0))
            .with_ramp(2.0)
            .with_origin(2.0, 1.3, 0.0)
            .with_height(1.1),
        SceneKind::Tunnel => TrajectorySpec::new(CurveKind::Line, 1.0, duration.unwrap_or(30.0))
            .with_ramp(2.0)
            .with_origin(0.0, 1.5, 0.0)
            .with_height(1.6),
        SceneKind::TwoRoomLoop => {
            TrajectorySpec::new(CurveKind::Ellipse { semi_x: 7.2, semi_y: 2.8, phase: PI }, 1.0, duration.unwrap_or(102.0))
                .with_ramp(2.0)
                .with_origin(12.0, 6.0, 0.0)
                .with_height(1.1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surfel::{point_moments, sorted_eigen};

    #[test]
    fn line_example() {
        let spec = TrajectorySpec::new(CurveKind::Line, 1.0, 10.0);
        let s = eval_trajectory(&spec, 2.0).unwrap();
        assert!((s.pose.translation - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        assert_eq!(s.acceleration, Vec3::zeros());
        assert!(s.angular_velocity.norm() < 1e-15);
        assert!(eval_trajectory(&spec, 10.5).is_err());
        assert!(eval_trajectory(&spec, -0.1).is_err());
    }

    #[test]
    fn circle_centripetal() {
        let spec = TrajectorySpec::new(CurveKind::Circle { radius: 10.0 }, 1.0, 100.0);
        for t in [0.0, 3.3, 50.0] {
            let s = eval_trajectory(&spec, t).unwrap();
            assert!((s.acceleration.norm() - 0.1).abs() < 1e-12);
            assert!((s.velocity.norm() - 1.0).abs() < 1e-12);
            assert!((s.angular_velocity - Vec3::new(0.0, 0.0, 0.1)).norm() < 1e-12);
        }
    }

    fn fd_check(spec: &TrajectorySpec) {
        let h = 1e-4;
        for k in 1..40 {
            let t = spec.duration * k as f64 / 40.0;
            if t + h > spec.duration {
                continue;
            }
            let p = |x: f64| eval_trajectory(spec, x).unwrap();
            let (a, b, c) = (p(t - h), p(t), p(t + h));
            let v_fd = (c.pose.translation - a.pose.translation) / (2.0 * h);
            let a_fd = (c.pose.translation - 2.0 * b.pose.translation + a.pose.translation) / (h * h);
            let w_fd = vee(&(a.pose.rotation.transpose() * c.pose.rotation - c.pose.rotation.transpose() * a.pose.rotation)) / (4.0 * h);
            assert!((v_fd - b.velocity).norm() < 1e-6, "velocity at {t}");
            assert!((a_fd - b.acceleration).norm() < 1e-4, "acceleration at {t}: {a_fd:?} vs {:?}", b.acceleration);
            assert!((w_fd - b.angular_velocity).norm() < 1e-6, "angular velocity at {t}");
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        fd_check(&TrajectorySpec::new(CurveKind::Figure8 { size: 5.0 }, 1.2, 20.0).with_ramp(3.0).with_bob(0.05, 1.0).with_sway(0.05, 0.5));
        fd_check(&default_trajectory(SceneKind::TwoRoomLoop, Some(30.0)));
        fd_check(
            &TrajectorySpec::new(CurveKind::Piecewise { controls: vec![(0.0, 0.0), (5.0, 0.0), (6.0, 4.0), (1.0, 5.0), (-1.0, 2.0)] }, 1.0, 20.0)
                .with_ramp(2.0),
        );
    }

    #[test]
    fn ramp_starts_at_rest() {
        let s = eval_trajectory(&default_trajectory(SceneKind::Corridor, None), 0.0).unwrap();
        assert_eq!(s.velocity, Vec3::zeros());
        assert!(s.acceleration.norm() < 1e-12);
    }

    #[test]
    fn stationary_imu_reads_gravity_reaction() {
        let spec = TrajectorySpec::stationary(1.0);
        let imu = simulate_imu(&spec, &imu_times(1.0, 0.01), &ImuNoise::none(), 1).unwrap();
        assert_eq!(imu.len(), 101);
        for s in imu {
            assert!((s.accel - Vec3::new(0.0, 0.0, 9.80665)).norm() < 1e-12);
            assert_eq!(s.gyro, Vec3::zeros());
        }
    }

    #[test]
    fn constant_yaw_rate_gyro() {
        let spec = TrajectorySpec::new(CurveKind::Circle { radius: 2.0 }, 1.0, 5.0);
        let imu = simulate_imu(&spec, &imu_times(5.0, 0.01), &ImuNoise::none(), 1).unwrap();
        for s in imu {
            assert!((s.gyro - Vec3::new(0.0, 0.0, 0.5)).norm() < 1e-12);
        }
    }

    #[test]
    fn imu_model_is_exact_before_noise() {
        let spec = TrajectorySpec::new(CurveKind::Figure8 { size: 4.0 }, 1.0, 10.0).with_sway(0.03, 0.4).with_ramp(1.0);
        let times = imu_times(10.0, 0.01);
        let imu = simulate_imu(&spec, &times, &ImuNoise::none(), 3).unwrap();
        for s in &imu {
            let st = eval_trajectory(&spec, s.time).unwrap();
            let resid_a = st.pose.rotation.transpose() * (st.acceleration - GRAVITY) - s.accel;
            let resid_w = st.angular_velocity - s.gyro;
            assert!(resid_a.norm() < 1e-12 && resid_w.norm() < 1e-12);
        }
    }

    #[test]
    fn seeded_determinism() {
        let spec = default_trajectory(SceneKind::Room, Some(2.0));
        let noise = ImuNoise { gyro_sigma: 0.01, accel_sigma: 0.05, ..ImuNoise::none() };
        let t = imu_times(2.0, 0.01);
        assert_eq!(simulate_imu(&spec, &t, &noise, 9).unwrap(), simulate_imu(&spec, &t, &noise, 9).unwrap());
        assert_ne!(simulate_imu(&spec, &t, &noise, 9).unwrap(), simulate_imu(&spec, &t, &noise, 10).unwrap());
        let world = build_scene(SceneKind::Room);
        let model = LidarModel { noise_sigma: 0.02, ..LidarModel::default() };
        assert_eq!(simulate_lidar(&world, &spec, &model, 4).unwrap(), simulate_lidar(&world, &spec, &model, 4).unwrap());
    }

    #[test]
    fn stationary_wall_range() {
        let mut world = World::default();
        world.add_patch(Patch::new(Vec3::new(1.0, 0.0, 0.0), -Vec3::x(), Vec3::y(), 50.0, 50.0));
        let spec = TrajectorySpec::stationary(0.5);
        let model = LidarModel { channels: 1, vertical_fov_deg: 0.0, rays_per_revolution: 360, ..LidarModel::default() };
        let pts = simulate_lidar(&world, &spec, &model, 0).unwrap();
        let on_axis: Vec<_> = pts.iter().filter(|p| p.position.y.abs() < 1e-12).collect();
        assert!(!on_axis.is_empty());
        for p in on_axis {
            assert!((p.position.norm() - 1.0).abs() < 1e-12);
        }
        for p in &pts {
            assert!((p.position.x - 1.0).abs() < 1e-12, "all returns lie on the wall plane x = 1");
        }
    }

    fn wall_thickness(points: &[LidarPoint], pose_at: &dyn Fn(f64) -> Pose) -> f64 {
        // y = 2.6 wall of the corridor, far from pillars
        let world: Vec<(f64, Vec3)> = points
            .iter()
            .map(|p| (p.time, pose_at(p.time).transform_point(&p.position)))
            .filter(|(_, w)| (w.y - 2.6).abs() < 0.15 && w.x > 10.0 && w.x < 12.8 && w.z > 0.5 && w.z < 1.5)
            .collect();
        assert!(world.len() > 20, "{} points", world.len());
        let (_, cov, _, _) = point_moments(world.iter().cloned());
        sorted_eigen(&cov).0.x
    }

    #[test]
    fn motion_distortion_visible_without_deskew() {
        let spec = TrajectorySpec::new(CurveKind::Line, 1.0, 10.0).with_origin(8.0, 1.0, 0.3).with_height(1.0);
        let world = build_scene(SceneKind::Corridor);
        let pts = simulate_lidar(&world, &spec, &LidarModel::default(), 0).unwrap();
        let window: Vec<LidarPoint> = pts.into_iter().filter(|p| p.time > 2.0 && p.time < 3.0).collect();
        let truth = |t: f64| eval_trajectory(&spec, t).unwrap().pose;
        let fixed = eval_trajectory(&spec, 2.5).unwrap().pose;
        let exact = wall_thickness(&window, &truth);
        let skewed = wall_thickness(&window, &|_| fixed);
        assert!(exact < 1e-12, "{exact}");
        // noise floor for a typical lidar noise of 2 cm
        assert!(skewed > 10.0 * 0.02f64.powi(2), "{skewed}");
    }
}
