//! Joint multi-world forecast metrics.
//!
//! All metrics are "joint": one world index is chosen per scenario (the
//! mode minimizing the mean error over agents, ties to the smallest
//! index) and every agent is scored inside that world. avgMinFDE and
//! avgMinADE choose their worlds independently; both miss rates reuse
//! the FDE world.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{ModeSet, Scenario};

/// Actor miss rate uses a fixed 2 m endpoint threshold.
pub const ACTOR_MISS_THRESHOLD_M: f64 = 2.0;

/// Velocity-dependent miss threshold: 1 m up to walking speed, ramping
/// linearly to 2 m at 11 m/s.
pub fn miss_threshold(v: f64) -> f64 {
    if v <= 1.4 {
        1.0
    } else if v <= 11.0 {
        1.0 + (v - 1.4) / (11.0 - 1.4)
    } else {
        2.0
    }
}

/// One scenario's scores plus the chosen world indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub avg_min_fde: f64,
    pub avg_min_ade: f64,
    pub actor_mr: f64,
    pub min_joint_mr: f64,
    pub idx_fde: usize,
    pub idx_ade: usize,
}

/// Aggregate report: unweighted means over scenarios, with the
/// per-scenario breakdown attached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub avg_min_fde: f64,
    pub avg_min_ade: f64,
    pub actor_mr: f64,
    pub min_joint_mr: f64,
    pub scenarios: Vec<ScenarioMetrics>,
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = k;
        }
    }
    best
}

/// Endpoint error of every agent in world k.
fn endpoint_errors(modes: &ModeSet, scn: &Scenario, k: usize) -> Vec<f64> {
    scn.agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let pred = *modes.agent_mode(k, i).last().expect("validated horizon");
            let gt = *a.future_gt.last().expect("validated horizon");
            (pred - gt).norm()
        })
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// GT speed at the final timestep, from the last backward difference.
fn final_speed(scn: &Scenario, agent: usize) -> f64 {
    let a = &scn.agents[agent];
    let last = *a.future_gt.last().expect("validated horizon");
    let prev = if a.future_gt.len() >= 2 {
        a.future_gt[a.future_gt.len() - 2]
    } else {
        *a.history.last().expect("validated history")
    };
    (last - prev).norm() * scn.sample_rate
}

fn miss_fraction(errors: &[f64], threshold: impl Fn(usize) -> f64) -> f64 {
    let missed = errors.iter().enumerate().filter(|(i, e)| **e > threshold(*i)).count();
    missed as f64 / errors.len() as f64
}

/// Scores one scenario's mode set against its ground truth.
pub fn evaluate_scenario(scn: &Scenario, modes: &ModeSet) -> Result<ScenarioMetrics> {
    scn.validate()?;
    modes.validate_against(scn)?;
    let k = modes.k();

    let fde_per_world: Vec<f64> =
        (0..k).map(|w| mean(&endpoint_errors(modes, scn, w))).collect();
    let idx_fde = argmin(&fde_per_world);

    let ade_per_world: Vec<f64> = (0..k)
        .map(|w| {
            let per_agent: Vec<f64> = scn
                .agents
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let pred = modes.agent_mode(w, i);
                    let errs: Vec<f64> = pred
                        .iter()
                        .zip(&a.future_gt)
                        .map(|(p, g)| (*p - *g).norm())
                        .collect();
                    mean(&errs)
                })
                .collect();
            mean(&per_agent)
        })
        .collect();
    let idx_ade = argmin(&ade_per_world);

    let best_errors = endpoint_errors(modes, scn, idx_fde);
    let actor_mr = miss_fraction(&best_errors, |_| ACTOR_MISS_THRESHOLD_M);
    let min_joint_mr = miss_fraction(&best_errors, |i| miss_threshold(final_speed(scn, i)));

    Ok(ScenarioMetrics {
        avg_min_fde: fde_per_world[idx_fde],
        avg_min_ade: ade_per_world[idx_ade],
        actor_mr,
        min_joint_mr,
        idx_fde,
        idx_ade,
    })
}

pub fn avg_min_fde(modes: &ModeSet, scn: &Scenario) -> Result<f64> {
    Ok(evaluate_scenario(scn, modes)?.avg_min_fde)
}

pub fn avg_min_ade(modes: &ModeSet, scn: &Scenario) -> Result<f64> {
    Ok(evaluate_scenario(scn, modes)?.avg_min_ade)
}

pub fn actor_mr(modes: &ModeSet, scn: &Scenario) -> Result<f64> {
    Ok(evaluate_scenario(scn, modes)?.actor_mr)
}

pub fn min_joint_mr(modes: &ModeSet, scn: &Scenario) -> Result<f64> {
    Ok(evaluate_scenario(scn, modes)?.min_joint_mr)
}

/// Scores a matched list of scenarios and mode sets; aggregates are
/// unweighted means in scenario order.
pub fn evaluate(scns: &[Scenario], modes: &[ModeSet]) -> Result<MetricReport> {
    if scns.is_empty() {
        return Err(Error::invalid("nothing to evaluate: empty scenario list"));
    }
    if scns.len() != modes.len() {
        return Err(Error::shape(format!(
            "{} scenarios but {} mode sets",
            scns.len(),
            modes.len()
        )));
    }
    let scenarios: Vec<ScenarioMetrics> = scns
        .iter()
        .zip(modes)
        .map(|(s, m)| evaluate_scenario(s, m))
        .collect::<Result<_>>()?;
    let pick = |f: fn(&ScenarioMetrics) -> f64| {
        scenarios.iter().map(f).sum::<f64>() / scenarios.len() as f64
    };
    Ok(MetricReport {
        avg_min_fde: pick(|s| s.avg_min_fde),
        avg_min_ade: pick(|s| s.avg_min_ade),
        actor_mr: pick(|s| s.actor_mr),
        min_joint_mr: pick(|s| s.min_joint_mr),
        scenarios,
    })
}

impl MetricReport {
    /// Human-readable summary with the per-scenario breakdown.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("metric            value\n");
        out.push_str(&format!("avg_min_fde_m     {:.6}\n", self.avg_min_fde));
        out.push_str(&format!("avg_min_ade_m     {:.6}\n", self.avg_min_ade));
        out.push_str(&format!("actor_mr          {:.6}\n", self.actor_mr));
        out.push_str(&format!("min_joint_mr      {:.6}\n", self.min_joint_mr));
        out.push_str(&format!("scenarios         {}\n", self.scenarios.len()));
        out.push('\n');
        out.push_str("scenario,avg_min_fde,avg_min_ade,actor_mr,min_joint_mr,idx_fde,idx_ade\n");
        for (i, s) in self.scenarios.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                i, s.avg_min_fde, s.avg_min_ade, s.actor_mr, s.min_joint_mr, s.idx_fde, s.idx_ade
            ));
        }
        out
    }

    /// Plot-ready rows: per-scenario lines then a mean row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,avg_min_fde,avg_min_ade,actor_mr,min_joint_mr\n");
        for (i, s) in self.scenarios.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                i, s.avg_min_fde, s.avg_min_ade, s.actor_mr, s.min_joint_mr
            ));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6},{:.6},{:.6}\n",
            self.avg_min_fde, self.avg_min_ade, self.actor_mr, self.min_joint_mr
        ));
        out
    }
}
