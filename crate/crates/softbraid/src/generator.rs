//! Synthetic traffic scenarios with controlled interaction structure,
//! plus the interaction-blind constant-velocity predictor whose output
//! the refiner corrects.
//!
//! Each scenario is built from one archetype: two core agents staged
//! into a specific relation (crossing paths, a yield, a merge) or
//! simple flows (curved lane following, a braking platoon), padded with
//! far-away filler traffic up to the drawn agent count. Construction is
//! checked against explicit post-conditions; a bounded, seeded retry
//! loop resamples the rare draw that violates one.
//!
//! Determinism: scenario i under root seed s is built from the derived
//! seed mix_seed(s, i) alone, so generation order (or parallelism)
//! cannot change outputs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{kinematics, Vec2};
use crate::scenario::{Agent, Lane, ModeSet, Scenario};
use crate::seeds::{mix_seed, rng as seed_rng};
use crate::topology::{braid_crossing, BRAID_EPSILON_M};

/// Kinematic smoothness bound every generated future obeys.
pub const MAX_ACCEL: f64 = 5.0;
/// Equal-time clearance every generated agent pair keeps.
pub const MIN_SEPARATION_M: f64 = 2.0;
/// Coarse modes beyond the first carry i.i.d. noise of this scale.
pub const COARSE_NOISE_SIGMA_M: f64 = 0.2;

const MAX_ATTEMPTS: u64 = 20;
const STATIC_SPEED_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Archetype {
    /// Two paths through a shared conflict point at offset times.
    Crossing,
    /// One agent brakes to a near stop short of the other's path.
    Yielding,
    /// One agent bends onto the other's lane behind it.
    Merging,
    /// A single agent tracking a circular arc.
    LaneFollow,
    /// A straight platoon braking gently in unison.
    CarFollow,
}

impl Archetype {
    pub const ALL: [Archetype; 5] = [
        Archetype::Crossing,
        Archetype::Yielding,
        Archetype::Merging,
        Archetype::LaneFollow,
        Archetype::CarFollow,
    ];

    /// Agents the archetype itself stages; fillers pad beyond this.
    fn core_agents(self) -> usize {
        match self {
            Archetype::Crossing | Archetype::Yielding | Archetype::Merging => 2,
            Archetype::LaneFollow => 1,
            Archetype::CarFollow => 2,
        }
    }

    /// Shortest future horizon the staging math supports.
    fn min_t_plus(self) -> usize {
        match self {
            Archetype::Crossing | Archetype::Yielding => 12,
            Archetype::Merging => 8,
            Archetype::LaneFollow | Archetype::CarFollow => 3,
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Archetype::Crossing => "crossing",
            Archetype::Yielding => "yielding",
            Archetype::Merging => "merging",
            Archetype::LaneFollow => "lane_follow",
            Archetype::CarFollow => "car_follow",
        };
        f.write_str(name)
    }
}

impl FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crossing" => Ok(Archetype::Crossing),
            "yielding" => Ok(Archetype::Yielding),
            "merging" => Ok(Archetype::Merging),
            "lane_follow" => Ok(Archetype::LaneFollow),
            "car_follow" => Ok(Archetype::CarFollow),
            other => Err(Error::invalid(format!(
                "unknown archetype {other:?}; expected one of crossing, yielding, merging, lane_follow, car_follow"
            ))),
        }
    }
}

/// Size knobs for generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorDims {
    pub n_min: usize,
    pub n_max: usize,
    pub t_minus: usize,
    pub t_plus: usize,
    pub sample_rate: f64,
}

impl Default for GeneratorDims {
    fn default() -> Self {
        GeneratorDims { n_min: 2, n_max: 6, t_minus: 10, t_plus: 30, sample_rate: 10.0 }
    }
}

impl GeneratorDims {
    pub fn validate(&self) -> Result<()> {
        if self.n_min < 1 || self.n_max < self.n_min {
            return Err(Error::invalid(format!(
                "agent count range [{}, {}] is invalid",
                self.n_min, self.n_max
            )));
        }
        if self.t_minus < 2 {
            return Err(Error::invalid("history horizon must be at least 2 samples"));
        }
        if self.t_plus < 3 {
            return Err(Error::invalid("future horizon must be at least 3 samples"));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(Error::invalid(format!(
                "sample_rate must be positive, got {}",
                self.sample_rate
            )));
        }
        Ok(())
    }
}

/// A staged agent: anchor position now, then per-step headings and
/// speeds over the future horizon.
struct Motion {
    anchor: Vec2,
    headings: Vec<f64>,
    speeds: Vec<f64>,
    lane_tag: &'static str,
}

fn heading_dir(angle: f64) -> Vec2 {
    Vec2::new(angle.cos(), angle.sin())
}

fn left_normal(v: Vec2) -> Vec2 {
    Vec2::new(-v.y, v.x)
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

impl Motion {
    fn constant(anchor: Vec2, heading: f64, speed: f64, steps: usize, tag: &'static str) -> Motion {
        Motion {
            anchor,
            headings: vec![heading; steps],
            speeds: vec![speed; steps],
            lane_tag: tag,
        }
    }

    /// Distance accrued once the step at `index` completes.
    fn travelled(&self, index: usize, dt: f64) -> f64 {
        self.speeds[..=index].iter().sum::<f64>() * dt
    }

    fn future(&self, dt: f64) -> Vec<Vec2> {
        let mut p = self.anchor;
        self.headings
            .iter()
            .zip(&self.speeds)
            .map(|(h, v)| {
                p = p + heading_dir(*h) * (v * dt);
                p
            })
            .collect()
    }

    /// History extends straight backwards at the entry speed and heading,
    /// ending at the anchor.
    fn agent(&self, id: u64, t_minus: usize, dt: f64) -> Agent {
        let back = heading_dir(self.headings[0]) * (self.speeds[0] * dt);
        let history = (0..t_minus)
            .map(|j| self.anchor - back * (t_minus - 1 - j) as f64)
            .collect();
        Agent { id, history, future_gt: self.future(dt) }
    }
}

/// Picks the conflict-point arrival index for the first agent and the
/// lag of the second, both safely inside the horizon.
fn arrival_times(rng: &mut ChaCha8Rng, t_plus: usize) -> (usize, usize) {
    let tau_a = rng.gen_range(t_plus / 3..=t_plus / 2);
    let max_lag = (t_plus - 2).saturating_sub(tau_a).max(2);
    let lag = rng.gen_range(4..=8).min(max_lag);
    (tau_a, tau_a + lag)
}

fn conflict_point(rng: &mut ChaCha8Rng) -> Vec2 {
    Vec2::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0))
}

/// Second path direction: rotated a clear 60°..120° off the first so
/// the paths are genuinely transverse.
fn transverse_heading(rng: &mut ChaCha8Rng, base: f64) -> f64 {
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    base + sign * rng.gen_range(60f64.to_radians()..120f64.to_radians())
}

fn stage_crossing(rng: &mut ChaCha8Rng, dims: &GeneratorDims) -> Vec<Motion> {
    let dt = 1.0 / dims.sample_rate;
    let c = conflict_point(rng);
    let th_a = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let v_a = rng.gen_range(8.0..12.0);
    let (tau_a, tau_b) = arrival_times(rng, dims.t_plus);
    let a = Motion {
        anchor: c - heading_dir(th_a) * (v_a * dt * (tau_a + 1) as f64),
        headings: vec![th_a; dims.t_plus],
        speeds: vec![v_a; dims.t_plus],
        lane_tag: "through",
    };

    let th_b = transverse_heading(rng, th_a);
    let v_b = rng.gen_range(8.0..11.0);
    let end_factor = rng.gen_range(0.75..0.85);
    let speeds_b: Vec<f64> = (0..dims.t_plus)
        .map(|t| v_b * (1.0 - (1.0 - end_factor) * t as f64 / (dims.t_plus - 1) as f64))
        .collect();
    let mut b = Motion {
        anchor: Vec2::ZERO,
        headings: vec![th_b; dims.t_plus],
        speeds: speeds_b,
        lane_tag: "through",
    };
    b.anchor = c - heading_dir(th_b) * b.travelled(tau_b, dt);
    vec![a, b]
}

fn stage_yielding(rng: &mut ChaCha8Rng, dims: &GeneratorDims) -> Vec<Motion> {
    let dt = 1.0 / dims.sample_rate;
    let c = conflict_point(rng);
    let th_a = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let v_a = rng.gen_range(8.0..12.0);
    let (tau_a, _) = arrival_times(rng, dims.t_plus);
    let a = Motion {
        anchor: c - heading_dir(th_a) * (v_a * dt * (tau_a + 1) as f64),
        headings: vec![th_a; dims.t_plus],
        speeds: vec![v_a; dims.t_plus],
        lane_tag: "through",
    };

    // The yielder sheds 60% of its speed by 60% of the horizon and stops
    // well short of the conflict point, so the paths never intersect in
    // space-time even though the situations are coupled.
    let th_b = transverse_heading(rng, th_a);
    let v_b = rng.gen_range(6.0..9.0);
    let horizon_s = dims.t_plus as f64 * dt;
    let speeds_b: Vec<f64> = (0..dims.t_plus)
        .map(|t| v_b * (1.0 - 0.6 * smoothstep(t as f64 * dt / (0.6 * horizon_s))))
        .collect();
    let margin = rng.gen_range(5.0..9.0);
    let total: f64 = speeds_b.iter().sum::<f64>() * dt;
    let b = Motion {
        anchor: c - heading_dir(th_b) * (total + margin),
        headings: vec![th_b; dims.t_plus],
        speeds: speeds_b,
        lane_tag: "through",
    };
    vec![a, b]
}

fn stage_merging(rng: &mut ChaCha8Rng, dims: &GeneratorDims) -> Vec<Motion> {
    let th = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let v_a = rng.gen_range(7.0..10.0);
    let anchor_a = conflict_point(rng);
    let a = Motion::constant(anchor_a, th, v_a, dims.t_plus, "through");

    let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let gap = rng.gen_range(8.0..14.0);
    let lateral = rng.gen_range(3.0..5.0);
    let bend = rng.gen_range(20f64.to_radians()..30f64.to_radians());
    let v_b = v_a * rng.gen_range(0.9..1.0);
    let blend_end = (0.7 * dims.t_plus as f64).max(1.0);
    let headings_b: Vec<f64> = (0..dims.t_plus)
        .map(|t| th - side * bend * (1.0 - smoothstep(t as f64 / blend_end)))
        .collect();
    let b = Motion {
        anchor: anchor_a - heading_dir(th) * gap + left_normal(heading_dir(th)) * (side * lateral),
        headings: headings_b,
        speeds: vec![v_b; dims.t_plus],
        lane_tag: "merge",
    };
    vec![a, b]
}

fn stage_lane_follow(rng: &mut ChaCha8Rng, dims: &GeneratorDims) -> Vec<Motion> {
    let anchor = conflict_point(rng);
    vec![arc_motion(rng, dims, anchor)]
}

/// Arc follower; speed capped so centripetal plus tangential
/// acceleration stays inside MAX_ACCEL.
fn arc_motion(rng: &mut ChaCha8Rng, dims: &GeneratorDims, anchor: Vec2) -> Motion {
    let dt = 1.0 / dims.sample_rate;
    let radius: f64 = rng.gen_range(30.0..120.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let v_cap = (0.86 * (MAX_ACCEL * radius.abs()).sqrt()).min(12.0);
    let v0 = rng.gen_range(6.0..v_cap.max(6.5));
    let ramp = rng.gen_range(0.9..1.1);
    let th0 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let speeds: Vec<f64> = (0..dims.t_plus)
        .map(|t| v0 * (1.0 + (ramp - 1.0) * t as f64 / (dims.t_plus - 1) as f64))
        .collect();
    let mut headings = Vec::with_capacity(dims.t_plus);
    let mut th = th0;
    for v in &speeds {
        headings.push(th);
        th += v * dt / radius;
    }
    Motion { anchor, headings, speeds, lane_tag: "through" }
}

fn stage_car_follow(rng: &mut ChaCha8Rng, dims: &GeneratorDims, n_target: usize) -> Vec<Motion> {
    let th = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let v0 = rng.gen_range(6.0..10.0);
    let drop = rng.gen_range(0.75..0.85);
    let speeds: Vec<f64> = (0..dims.t_plus)
        .map(|t| v0 * (1.0 - (1.0 - drop) * smoothstep(t as f64 / (dims.t_plus - 1) as f64)))
        .collect();
    let leader_anchor = conflict_point(rng);
    let platoon = (2 + rng.gen_range(0..=1usize)).min(n_target.max(2));
    let mut behind = 0.0;
    (0..platoon)
        .map(|i| {
            if i > 0 {
                behind += rng.gen_range(8.0..15.0);
            }
            Motion {
                anchor: leader_anchor - heading_dir(th) * behind,
                headings: vec![th; dims.t_plus],
                speeds: speeds.clone(),
                lane_tag: "through",
            }
        })
        .collect()
}

/// Background traffic far enough out that it rarely interferes with the
/// staged core; the global separation check still vets it.
fn filler_motion(rng: &mut ChaCha8Rng, dims: &GeneratorDims) -> Motion {
    let ang = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let r = rng.gen_range(70.0..110.0);
    let anchor = Vec2::new(r * ang.cos(), r * ang.sin());
    let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let speed = rng.gen_range(5.0..9.0);
    Motion::constant(anchor, heading, speed, dims.t_plus, "through")
}

/// Every 3rd path point (always keeping the endpoint) as a lane
/// centerline.
fn thin_path(points: &[Vec2]) -> Vec<Vec2> {
    let mut out: Vec<Vec2> = points.iter().copied().step_by(3).collect();
    let last = *points.last().expect("thin_path needs points");
    if out.last() != Some(&last) {
        out.push(last);
    }
    if out.len() < 2 {
        out.insert(0, points[0]);
    }
    out
}

fn offset_polyline(points: &[Vec2], offset: f64) -> Vec<Vec2> {
    let n = points.len();
    (0..n)
        .map(|i| {
            let ahead = points[(i + 1).min(n - 1)];
            let behind = points[i.saturating_sub(1)];
            let d = ahead - behind;
            let len = d.norm();
            let normal = if len < 1e-12 { Vec2::new(0.0, 1.0) } else { left_normal(d * (1.0 / len)) };
            points[i] + normal * offset
        })
        .collect()
}

fn build_candidate(
    archetype: Archetype,
    rng: &mut ChaCha8Rng,
    dims: &GeneratorDims,
) -> Scenario {
    let n_lo = dims.n_min.max(archetype.core_agents());
    let n_hi = dims.n_max.max(n_lo);
    let n_target = rng.gen_range(n_lo..=n_hi);

    let mut motions = match archetype {
        Archetype::Crossing => stage_crossing(rng, dims),
        Archetype::Yielding => stage_yielding(rng, dims),
        Archetype::Merging => stage_merging(rng, dims),
        Archetype::LaneFollow => stage_lane_follow(rng, dims),
        Archetype::CarFollow => stage_car_follow(rng, dims, n_target),
    };
    while motions.len() < n_target {
        motions.push(filler_motion(rng, dims));
    }

    let dt = 1.0 / dims.sample_rate;
    let agents: Vec<Agent> = motions
        .iter()
        .enumerate()
        .map(|(i, m)| m.agent(i as u64, dims.t_minus, dt))
        .collect();

    let mut lanes = Vec::new();
    for (agent, motion) in agents.iter().zip(&motions) {
        let mut path = agent.history.clone();
        path.extend_from_slice(&agent.future_gt);
        let centerline = thin_path(&path);
        lanes.push(Lane {
            id: lanes.len() as u64,
            centerline: centerline.clone(),
            tag: motion.lane_tag.to_string(),
        });
        if rng.gen::<bool>() {
            let side = if rng.gen::<bool>() { 3.5 } else { -3.5 };
            lanes.push(Lane {
                id: lanes.len() as u64,
                centerline: offset_polyline(&centerline, side),
                tag: "offset".to_string(),
            });
        }
    }

    Scenario {
        sample_rate: dims.sample_rate,
        t_minus: dims.t_minus,
        t_plus: dims.t_plus,
        agents,
        lanes,
    }
}

/// Backward-difference speed at future index t (t = 0 differences
/// against the last history sample).
fn future_speed(scn: &Scenario, agent: usize, t: usize) -> f64 {
    let f = &scn.agents[agent].future_gt;
    let prev = if t == 0 {
        *scn.agents[agent].history.last().expect("validated history")
    } else {
        f[t - 1]
    };
    (f[t] - prev).norm() * scn.sample_rate
}

fn scenario_ok(scn: &Scenario, archetype: Archetype) -> bool {
    if scn.validate().is_err() {
        return false;
    }
    for i in 0..scn.n() {
        let traj = match scn.future_traj(i) {
            Ok(t) => t,
            Err(_) => return false,
        };
        let kin = match kinematics(&traj) {
            Ok(k) => k,
            Err(_) => return false,
        };
        if kin.acceleration.iter().any(|a| a.norm() > MAX_ACCEL + 1e-9) {
            return false;
        }
    }
    // Equal-time clearance across history and future, every pair.
    for i in 0..scn.n() {
        for j in i + 1..scn.n() {
            let ai = &scn.agents[i];
            let aj = &scn.agents[j];
            let close = ai
                .history
                .iter()
                .zip(&aj.history)
                .chain(ai.future_gt.iter().zip(&aj.future_gt))
                .any(|(p, q)| (*p - *q).norm_sq() < MIN_SEPARATION_M * MIN_SEPARATION_M);
            if close {
                return false;
            }
        }
    }
    match archetype {
        Archetype::Crossing => {
            let (fa, fb) = match (scn.future_traj(0), scn.future_traj(1)) {
                (Ok(a), Ok(b)) => (a, b),
                _ => return false,
            };
            matches!(braid_crossing(&fa, &fb, BRAID_EPSILON_M), Ok((x, y)) if x || y)
        }
        Archetype::Yielding => {
            let (fa, fb) = match (scn.future_traj(0), scn.future_traj(1)) {
                (Ok(a), Ok(b)) => (a, b),
                _ => return false,
            };
            // Entangled but never space-time intersecting: the hard
            // crossing test must stay empty while the yielder sheds at
            // least 30% of its entry speed by mid-horizon.
            let no_cross = matches!(braid_crossing(&fa, &fb, BRAID_EPSILON_M), Ok((false, false)));
            let v_entry = future_speed(scn, 1, 0);
            let v_mid = future_speed(scn, 1, scn.t_plus / 2);
            no_cross && v_mid <= 0.7 * v_entry
        }
        _ => true,
    }
}

fn generate_one(archetype: Archetype, scenario_seed: u64, dims: &GeneratorDims) -> Result<Scenario> {
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = seed_rng(mix_seed(scenario_seed, attempt));
        let scn = build_candidate(archetype, &mut rng, dims);
        if scenario_ok(&scn, archetype) {
            return Ok(scn);
        }
    }
    Err(Error::invalid(format!(
        "archetype {archetype} failed its post-conditions {MAX_ATTEMPTS} times in a row"
    )))
}

/// Generates `count` scenarios cycling through `mix` in order, each from
/// its own derived seed.
pub fn generate(
    mix: &[Archetype],
    count: usize,
    seed: u64,
    dims: &GeneratorDims,
) -> Result<Vec<Scenario>> {
    if mix.is_empty() {
        return Err(Error::invalid("archetype mix must not be empty"));
    }
    if count < 1 {
        return Err(Error::invalid("count must be at least 1"));
    }
    dims.validate()?;
    for a in mix {
        if dims.n_max < a.core_agents() {
            return Err(Error::invalid(format!(
                "archetype {a} stages {} agents but n_max is {}",
                a.core_agents(),
                dims.n_max
            )));
        }
        if dims.t_plus < a.min_t_plus() {
            return Err(Error::invalid(format!(
                "archetype {a} needs a future horizon of at least {} samples, got {}",
                a.min_t_plus(),
                dims.t_plus
            )));
        }
    }
    (0..count)
        .map(|i| generate_one(mix[i % mix.len()], mix_seed(seed, i as u64), dims))
        .collect()
}

const PRESETS: [(f64, f64); 8] = [
    (10.0, 1.0),
    (-10.0, 1.0),
    (0.0, 1.2),
    (0.0, 0.8),
    (10.0, 1.2),
    (-10.0, 0.8),
    (20.0, 1.0),
    (-20.0, 1.0),
];

/// Constant-velocity multi-modal predictor. Mode 0 extrapolates the last
/// observed velocity untouched; modes 1.. rotate and rescale it through
/// the preset grid (±10°/±20°, ±20% speed) and add seeded waypoint noise.
/// Static agents stay exactly static in every mode.
pub fn coarse_predict(scn: &Scenario, k: usize, seed: u64) -> Result<ModeSet> {
    if k < 1 {
        return Err(Error::invalid("coarse predictor needs at least one mode"));
    }
    scn.validate()?;
    let dt = 1.0 / scn.sample_rate;
    let mut modes = Vec::with_capacity(k);
    for mode in 0..k {
        let mut per_agent = Vec::with_capacity(scn.n());
        for (i, agent) in scn.agents.iter().enumerate() {
            let last = *agent.history.last().expect("validated history");
            let prev = agent.history[agent.history.len() - 2];
            let v = (last - prev) * scn.sample_rate;
            let v_mode = if mode == 0 {
                v
            } else {
                let (deg, factor) = PRESETS[(mode - 1) % PRESETS.len()];
                v.rotated(deg.to_radians()) * factor
            };
            let mut points: Vec<Vec2> = (1..=scn.t_plus)
                .map(|t| last + v_mode * (dt * t as f64))
                .collect();
            if mode > 0 && v.norm() >= STATIC_SPEED_EPS {
                let mut nrng = seed_rng(mix_seed(mix_seed(seed, mode as u64), i as u64));
                let normal = Normal::new(0.0, COARSE_NOISE_SIGMA_M)
                    .expect("fixed positive sigma");
                for p in &mut points {
                    p.x += normal.sample(&mut nrng);
                    p.y += normal.sample(&mut nrng);
                }
            }
            per_agent.push(points);
        }
        modes.push(per_agent);
    }
    let set = ModeSet { modes };
    set.validate_against(scn)?;
    Ok(set)
}

/// Per-scenario fan-out of [`coarse_predict`]: scenario i uses the
/// derived seed mix_seed(seed, i).
pub fn coarse_predict_all(scns: &[Scenario], k: usize, seed: u64) -> Result<Vec<ModeSet>> {
    scns.iter()
        .enumerate()
        .map(|(i, s)| coarse_predict(s, k, mix_seed(seed, i as u64)))
        .collect()
}
