//! Trajectory topology: hard braid crossings, soft intersection points,
//! and the soft-braid feature records exchanged between agents and lanes.
//!
//! A *soft intersection* between two trajectories is the pair of same-time
//! samples at minimum mutual distance; between a trajectory and a lane it
//! is the (sample, lane vertex) pair at minimum distance. The *soft-braid*
//! record collects the kinematics of both parties at that time, rotated
//! into the receiving agent's frame, plus the distance and the local
//! bearing. The *hard* braid relation is the binary time-ordered crossing
//! test used by the connectivity-only ablation.
//!
//! Everything here is exhaustive over the short horizons this engine
//! targets; no sub-sample interpolation is performed. Argmin ties break to
//! the smallest time index, then the smallest lane-vertex index, so
//! results are identical across platforms.

use crate::error::{Error, Result};
use crate::geometry::{Kinematics, LocalFrame, Trajectory, Vec2};

/// Below this separation the bearing between two points is undefined;
/// the angle is 0 by convention.
pub const ZERO_DISTANCE_EPS_M: f64 = 1e-9;

/// Default crossing width for the hard braid relation, roughly a vehicle
/// width.
pub const BRAID_EPSILON_M: f64 = 2.0;

/// Minimum-distance pairing between a trajectory and another trajectory or
/// a lane polyline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftIntersection {
    /// Sample index t achieving the minimum.
    pub time_index: usize,
    /// This trajectory's point at `time_index`.
    pub p_self: Vec2,
    /// The other trajectory's point at `time_index`, or the nearest lane
    /// vertex.
    pub p_other: Vec2,
    /// Euclidean distance between the two points.
    pub distance: f64,
    /// Global-frame bearing of `p_other − p_self`; 0 when the points
    /// coincide.
    pub angle_global: f64,
}

/// Ten-scalar trajectory-trajectory soft-braid record, all quantities in
/// the receiving agent's local frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftBraidTT {
    pub v_self: Vec2,
    pub v_other: Vec2,
    pub a_self: Vec2,
    pub a_other: Vec2,
    pub distance: f64,
    pub angle: f64,
}

impl SoftBraidTT {
    pub fn to_array(&self) -> [f64; 10] {
        [
            self.v_self.x,
            self.v_self.y,
            self.v_other.x,
            self.v_other.y,
            self.a_self.x,
            self.a_self.y,
            self.a_other.x,
            self.a_other.y,
            self.distance,
            self.angle,
        ]
    }
}

/// Six-scalar trajectory-lane soft-braid record in the agent's frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftBraidTL {
    pub v: Vec2,
    pub a: Vec2,
    pub distance: f64,
    pub angle: f64,
}

impl SoftBraidTL {
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.v.x, self.v.y, self.a.x, self.a.y, self.distance, self.angle,
        ]
    }
}

/// Whether a neighborhood query is agent-to-agent (self excluded) or
/// agent-to-lane (every column eligible).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeighborhoodKind {
    AgentAgent,
    AgentLane,
}

fn bearing(from: Vec2, to: Vec2, distance: f64) -> f64 {
    if distance < ZERO_DISTANCE_EPS_M {
        0.0
    } else {
        (to - from).angle()
    }
}

/// Same-time closest approach of two equal-length trajectories.
/// Ties break to the smallest time index.
pub fn soft_intersection_tt(traj_i: &Trajectory, traj_j: &Trajectory) -> Result<SoftIntersection> {
    if traj_i.len() != traj_j.len() {
        return Err(Error::invalid(format!(
            "soft_intersection_tt needs equal lengths, got {} and {}",
            traj_i.len(),
            traj_j.len()
        )));
    }
    let mut best_t = 0usize;
    let mut best_sq = f64::INFINITY;
    for t in 0..traj_i.len() {
        let sq = (traj_j.points[t] - traj_i.points[t]).norm_sq();
        if sq < best_sq {
            best_sq = sq;
            best_t = t;
        }
    }
    let p_self = traj_i.points[best_t];
    let p_other = traj_j.points[best_t];
    let distance = best_sq.sqrt();
    Ok(SoftIntersection {
        time_index: best_t,
        p_self,
        p_other,
        distance,
        angle_global: bearing(p_self, p_other, distance),
    })
}

/// Closest approach between a trajectory and the vertices of a lane
/// centerline. Ties break to the smallest time index, then the smallest
/// vertex index.
pub fn soft_intersection_tl(traj_i: &Trajectory, lane: &[Vec2]) -> Result<SoftIntersection> {
    if lane.is_empty() {
        return Err(Error::invalid("soft_intersection_tl needs a nonempty lane"));
    }
    let mut best = (0usize, 0usize);
    let mut best_sq = f64::INFINITY;
    for (t, p) in traj_i.points.iter().enumerate() {
        for (k, v) in lane.iter().enumerate() {
            let sq = (*v - *p).norm_sq();
            if sq < best_sq {
                best_sq = sq;
                best = (t, k);
            }
        }
    }
    let p_self = traj_i.points[best.0];
    let p_other = lane[best.1];
    let distance = best_sq.sqrt();
    Ok(SoftIntersection {
        time_index: best.0,
        p_self,
        p_other,
        distance,
        angle_global: bearing(p_self, p_other, distance),
    })
}

/// Builds both directed trajectory-trajectory records for a pair. Each
/// direction rotates the pair's velocities and accelerations at the soft
/// intersection time into the receiving agent's frame. The j←i angle
/// carries the literal negation of the received bearing (the defining
/// equations negate the angle rather than re-deriving the reversed
/// bearing, which would differ by π).
pub fn soft_braid_tt(
    traj_i: &Trajectory,
    traj_j: &Trajectory,
    kin_i: &Kinematics,
    kin_j: &Kinematics,
    frame_i: &LocalFrame,
    frame_j: &LocalFrame,
) -> Result<(SoftBraidTT, SoftBraidTT)> {
    debug_assert_eq!(kin_i.velocity.len(), traj_i.len());
    debug_assert_eq!(kin_j.velocity.len(), traj_j.len());
    let si = soft_intersection_tt(traj_i, traj_j)?;
    let t = si.time_index;
    let i_to_j = SoftBraidTT {
        v_self: frame_i.rotate_to_local(kin_i.velocity[t]),
        v_other: frame_i.rotate_to_local(kin_j.velocity[t]),
        a_self: frame_i.rotate_to_local(kin_i.acceleration[t]),
        a_other: frame_i.rotate_to_local(kin_j.acceleration[t]),
        distance: si.distance,
        angle: if si.distance < ZERO_DISTANCE_EPS_M {
            0.0
        } else {
            frame_i.angle_to_local(si.angle_global)
        },
    };
    let j_to_i = SoftBraidTT {
        v_self: frame_j.rotate_to_local(kin_j.velocity[t]),
        v_other: frame_j.rotate_to_local(kin_i.velocity[t]),
        a_self: frame_j.rotate_to_local(kin_j.acceleration[t]),
        a_other: frame_j.rotate_to_local(kin_i.acceleration[t]),
        distance: si.distance,
        angle: if si.distance < ZERO_DISTANCE_EPS_M {
            0.0
        } else {
            -frame_j.angle_to_local(si.angle_global)
        },
    };
    Ok((i_to_j, j_to_i))
}

/// Trajectory-lane soft-braid record in the agent's own frame.
pub fn soft_braid_tl(
    traj_i: &Trajectory,
    lane: &[Vec2],
    kin_i: &Kinematics,
    frame_i: &LocalFrame,
) -> Result<SoftBraidTL> {
    debug_assert_eq!(kin_i.velocity.len(), traj_i.len());
    let si = soft_intersection_tl(traj_i, lane)?;
    let t = si.time_index;
    Ok(SoftBraidTL {
        v: frame_i.rotate_to_local(kin_i.velocity[t]),
        a: frame_i.rotate_to_local(kin_i.acceleration[t]),
        distance: si.distance,
        angle: if si.distance < ZERO_DISTANCE_EPS_M {
            0.0
        } else {
            frame_i.angle_to_local(si.angle_global)
        },
    })
}

/// Hard braid crossing: σ_{i←j} = 1 iff some strictly time-ordered sample
/// pair 0 < t_i < t_j comes within `epsilon`. Exhaustive scan over all
/// ordered pairs; returns both directions.
pub fn braid_crossing(
    traj_i: &Trajectory,
    traj_j: &Trajectory,
    epsilon: f64,
) -> Result<(bool, bool)> {
    if traj_i.len() != traj_j.len() {
        return Err(Error::invalid(format!(
            "braid_crossing needs equal lengths, got {} and {}",
            traj_i.len(),
            traj_j.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!(
            "braid_crossing needs epsilon > 0, got {epsilon}"
        )));
    }
    let eps_sq = epsilon * epsilon;
    let n = traj_i.len();
    let crosses = |a: &[Vec2], b: &[Vec2]| -> bool {
        for ta in 1..n {
            for tb in ta + 1..n {
                if (b[tb] - a[ta]).norm_sq() < eps_sq {
                    return true;
                }
            }
        }
        false
    };
    Ok((
        crosses(&traj_i.points, &traj_j.points),
        crosses(&traj_j.points, &traj_i.points),
    ))
}

/// Threshold neighborhoods over a row-major distance matrix. Row i lists
/// every column j with d_ij ≤ tau, in ascending index order; agent-agent
/// queries exclude the diagonal.
pub fn neighborhoods(distances: &[Vec<f64>], tau: f64, kind: NeighborhoodKind) -> Vec<Vec<usize>> {
    distances
        .iter()
        .enumerate()
        .map(|(i, row)| {
            debug_assert!(row.iter().all(|d| d.is_finite() && *d >= 0.0));
            row.iter()
                .enumerate()
                .filter(|(j, d)| (kind == NeighborhoodKind::AgentLane || *j != i) && **d <= tau)
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}
