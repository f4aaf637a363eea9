//! Planar geometry: agent-local frames, rigid transforms, and
//! finite-difference kinematics.
//!
//! Every topology feature downstream is expressed in some agent's local
//! frame: origin at the agent's last observed position, x-axis along its
//! heading there. Transforms follow the row-vector convention
//!
//! ```text
//! q = (p − O) · M,   M = [ cos θ  −sin θ ]
//!                        [ sin θ   cos θ ]
//! ```
//!
//! so a point one meter ahead of the agent maps to (1, 0) regardless of
//! where the agent sits in the global frame. Velocities and accelerations
//! rotate without the origin shift; angles transform by subtracting the
//! heading and re-wrapping into (−π, π].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Displacements shorter than this count as "no motion" when deriving a
/// heading from trajectory samples.
pub const HEADING_EPS_M: f64 = 1e-6;

/// A 2-D point or vector in meters (or m/s, m/s² for derivatives).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn norm_sq(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// Polar angle atan2(y, x).
    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Rotation by `a` radians (counterclockwise, global convention).
    pub fn rotated(self, a: f64) -> Vec2 {
        let (s, c) = a.sin_cos();
        Vec2::new(self.x * c - self.y * s, self.x * s + self.y * c)
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

// Compact [x, y] form on disk; point lists dominate file size.
impl Serialize for Vec2 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        (self.x, self.y).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vec2 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let (x, y) = <(f64, f64)>::deserialize(d)?;
        Ok(Vec2::new(x, y))
    }
}

/// Normalizes an angle into the half-open interval (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let w = (a + std::f64::consts::PI).rem_euclid(two_pi);
    if w == 0.0 {
        std::f64::consts::PI
    } else {
        w - std::f64::consts::PI
    }
}

/// A trajectory sampled at a fixed rate. `points` are global-frame meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<Vec2>,
    /// Samples per second (Hz).
    pub sample_rate: f64,
}

impl Trajectory {
    pub fn new(points: Vec<Vec2>, sample_rate: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid(format!(
                "trajectory needs at least 2 points, got {}",
                points.len()
            )));
        }
        if !(sample_rate > 0.0) || !sample_rate.is_finite() {
            return Err(Error::invalid(format!(
                "sample_rate must be positive and finite, got {sample_rate}"
            )));
        }
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::invalid(format!(
                "trajectory contains non-finite point ({}, {})",
                p.x, p.y
            )));
        }
        Ok(Trajectory {
            points,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Agent-local coordinate frame: origin at the history endpoint, x-axis
/// along the heading there.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalFrame {
    pub origin: Vec2,
    /// Radians in (−π, π].
    pub heading: f64,
}

impl LocalFrame {
    pub fn new(origin: Vec2, heading: f64) -> Self {
        LocalFrame {
            origin,
            heading: wrap_angle(heading),
        }
    }

    /// Frame anchored at the last history point. The heading is the
    /// direction of the final displacement; if that displacement is shorter
    /// than [`HEADING_EPS_M`] the most recent nonzero displacement is used,
    /// and a history with no motion at all gets heading 0.
    pub fn from_history(history: &Trajectory) -> Result<Self> {
        if history.len() < 2 {
            return Err(Error::invalid(
                "frame_from_history needs at least 2 history points",
            ));
        }
        let p = &history.points;
        let origin = p[p.len() - 1];
        let mut heading = 0.0;
        for k in (1..p.len()).rev() {
            let d = p[k] - p[k - 1];
            if d.norm() >= HEADING_EPS_M {
                heading = d.angle();
                break;
            }
        }
        Ok(LocalFrame::new(origin, heading))
    }

    /// Global point → local point: (p − O) · M.
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        let d = p - self.origin;
        let (s, c) = self.heading.sin_cos();
        Vec2::new(d.x * c + d.y * s, -d.x * s + d.y * c)
    }

    /// Local point → global point: q · Mᵀ + O.
    pub fn from_local(&self, q: Vec2) -> Vec2 {
        let (s, c) = self.heading.sin_cos();
        Vec2::new(q.x * c - q.y * s + self.origin.x, q.x * s + q.y * c + self.origin.y)
    }

    /// Rotates a free vector (velocity, acceleration) into the frame.
    /// No origin shift: derivatives are translation-invariant.
    pub fn rotate_to_local(&self, v: Vec2) -> Vec2 {
        let (s, c) = self.heading.sin_cos();
        Vec2::new(v.x * c + v.y * s, -v.x * s + v.y * c)
    }

    /// Rotates a free vector from the frame back to global coordinates.
    pub fn rotate_from_local(&self, v: Vec2) -> Vec2 {
        let (s, c) = self.heading.sin_cos();
        Vec2::new(v.x * c - v.y * s, v.x * s + v.y * c)
    }

    /// Global angle → local angle, wrapped into (−π, π].
    pub fn angle_to_local(&self, a: f64) -> f64 {
        wrap_angle(a - self.heading)
    }
}

/// Sampled velocity and acceleration of a trajectory, same length as the
/// source points.
#[derive(Clone, Debug, PartialEq)]
pub struct Kinematics {
    pub velocity: Vec<Vec2>,
    pub acceleration: Vec<Vec2>,
}

/// First derivative of a sample sequence: central differences at interior
/// samples, one-sided 3-point (second-order) differences at the endpoints,
/// falling back to the plain forward difference when only 2 samples exist.
/// Second-order boundaries keep the scheme exact for quadratics, which the
/// acceleration contract relies on.
pub fn derivative(points: &[Vec2], sample_rate: f64) -> Vec<Vec2> {
    let n = points.len();
    debug_assert!(n >= 2);
    let mut d = vec![Vec2::ZERO; n];
    if n == 2 {
        let v = (points[1] - points[0]) * sample_rate;
        d[0] = v;
        d[1] = v;
        return d;
    }
    let half = 0.5 * sample_rate;
    d[0] = (points[0] * -3.0 + points[1] * 4.0 - points[2]) * half;
    for t in 1..n - 1 {
        d[t] = (points[t + 1] - points[t - 1]) * half;
    }
    d[n - 1] = (points[n - 1] * 3.0 - points[n - 2] * 4.0 + points[n - 3]) * half;
    d
}

/// Velocity and acceleration via repeated [`derivative`]. Needs at least
/// 3 samples so the acceleration stencil is defined.
pub fn kinematics(traj: &Trajectory) -> Result<Kinematics> {
    if traj.len() < 3 {
        return Err(Error::invalid(format!(
            "kinematics needs at least 3 samples (2 suffice for velocity alone), got {}",
            traj.len()
        )));
    }
    let velocity = derivative(&traj.points, traj.sample_rate);
    let acceleration = derivative(&velocity, traj.sample_rate);
    Ok(Kinematics {
        velocity,
        acceleration,
    })
}

/// Row-major n×n stencil matrix D such that `D · P` equals
/// [`derivative`]`(P)` for an n×2 matrix of points. Used to express the
/// same difference scheme as a matrix product where a differentiable form
/// is needed.
pub fn derivative_stencil(n: usize, sample_rate: f64) -> Vec<f64> {
    assert!(n >= 2, "stencil needs at least 2 samples");
    let mut m = vec![0.0; n * n];
    if n == 2 {
        m[0] = -sample_rate;
        m[1] = sample_rate;
        m[2] = -sample_rate;
        m[3] = sample_rate;
        return m;
    }
    let half = 0.5 * sample_rate;
    m[0] = -3.0 * half;
    m[1] = 4.0 * half;
    m[2] = -half;
    for t in 1..n - 1 {
        m[t * n + t - 1] = -half;
        m[t * n + t + 1] = half;
    }
    let last = n - 1;
    m[last * n + last] = 3.0 * half;
    m[last * n + last - 1] = -4.0 * half;
    m[last * n + last - 2] = half;
    m
}
