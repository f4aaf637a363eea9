//! Scenario and prediction containers plus their line-delimited file
//! formats.
//!
//! Both formats share one container shape: a JSON header record on the
//! first line carrying the schema version and units, then one JSON
//! record per line. Positions are meters, sample rates Hz. Floats
//! round-trip bit-exactly through the JSON encoder.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Trajectory, Vec2};

pub const SCENARIO_VERSION: &str = "sbr-scn-v1";
pub const MODES_VERSION: &str = "sbr-mode-v1";

/// One tracked agent: observed history and ground-truth future, both in
/// the shared world frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Agent {
    pub id: u64,
    pub history: Vec<Vec2>,
    pub future_gt: Vec<Vec2>,
}

/// A lane centerline polyline with a free-form semantic tag
/// ("through", "merge", "offset", ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lane {
    pub id: u64,
    pub centerline: Vec<Vec2>,
    pub tag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub sample_rate: f64,
    pub t_minus: usize,
    pub t_plus: usize,
    pub agents: Vec<Agent>,
    pub lanes: Vec<Lane>,
}

impl Scenario {
    pub fn n(&self) -> usize {
        self.agents.len()
    }

    /// History as a trajectory carrying the scenario rate.
    pub fn history_traj(&self, agent: usize) -> Result<Trajectory> {
        Trajectory::new(self.agents[agent].history.clone(), self.sample_rate)
    }

    pub fn future_traj(&self, agent: usize) -> Result<Trajectory> {
        Trajectory::new(self.agents[agent].future_gt.clone(), self.sample_rate)
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::invalid("scenario needs at least one agent"));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(Error::invalid(format!(
                "sample_rate must be a positive finite Hz value, got {}",
                self.sample_rate
            )));
        }
        if self.t_minus < 2 {
            return Err(Error::invalid("history horizon must be at least 2 samples"));
        }
        if self.t_plus < 1 {
            return Err(Error::invalid("future horizon must be at least 1 sample"));
        }
        for a in &self.agents {
            if a.history.len() != self.t_minus {
                return Err(Error::invalid(format!(
                    "agent {} history has {} samples, scenario horizon is {}",
                    a.id,
                    a.history.len(),
                    self.t_minus
                )));
            }
            if a.future_gt.len() != self.t_plus {
                return Err(Error::invalid(format!(
                    "agent {} future has {} samples, scenario horizon is {}",
                    a.id,
                    a.future_gt.len(),
                    self.t_plus
                )));
            }
            if a.history.iter().chain(&a.future_gt).any(|p| !p.is_finite()) {
                return Err(Error::invalid(format!("agent {} holds non-finite coordinates", a.id)));
            }
        }
        for l in &self.lanes {
            if l.centerline.is_empty() {
                return Err(Error::invalid(format!("lane {} has an empty centerline", l.id)));
            }
            if l.centerline.iter().any(|p| !p.is_finite()) {
                return Err(Error::invalid(format!("lane {} holds non-finite coordinates", l.id)));
            }
        }
        Ok(())
    }
}

/// K predicted futures for every agent of one scenario: `modes[k][i]` is
/// agent i's k-th candidate future, T₊ points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSet {
    pub modes: Vec<Vec<Vec<Vec2>>>,
}

impl ModeSet {
    pub fn k(&self) -> usize {
        self.modes.len()
    }

    pub fn n(&self) -> usize {
        self.modes.first().map_or(0, |m| m.len())
    }

    pub fn t_plus(&self) -> usize {
        self.modes
            .first()
            .and_then(|m| m.first())
            .map_or(0, |t| t.len())
    }

    pub fn agent_mode(&self, k: usize, agent: usize) -> &[Vec2] {
        &self.modes[k][agent]
    }

    /// A single-mode set holding the ground truth, handy as the "perfect
    /// predictor" in evaluation plumbing.
    pub fn from_gt(scn: &Scenario) -> Self {
        ModeSet {
            modes: vec![scn.agents.iter().map(|a| a.future_gt.clone()).collect()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::invalid("mode set needs at least one mode"));
        }
        let n = self.n();
        let t = self.t_plus();
        if n == 0 {
            return Err(Error::invalid("mode set needs at least one agent"));
        }
        if t == 0 {
            return Err(Error::invalid("mode set needs at least one future sample"));
        }
        for (k, mode) in self.modes.iter().enumerate() {
            if mode.len() != n {
                return Err(Error::invalid(format!(
                    "mode {k} covers {} agents, mode 0 covers {n}",
                    mode.len()
                )));
            }
            for (i, traj) in mode.iter().enumerate() {
                if traj.len() != t {
                    return Err(Error::invalid(format!(
                        "mode {k} agent {i} has {} samples, expected {t}",
                        traj.len()
                    )));
                }
                if traj.iter().any(|p| !p.is_finite()) {
                    return Err(Error::invalid(format!(
                        "mode {k} agent {i} holds non-finite coordinates"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Shape agreement with the scenario the modes predict.
    pub fn validate_against(&self, scn: &Scenario) -> Result<()> {
        self.validate()?;
        if self.n() != scn.n() {
            return Err(Error::shape(format!(
                "mode set covers {} agents, scenario has {}",
                self.n(),
                scn.n()
            )));
        }
        if self.t_plus() != scn.t_plus {
            return Err(Error::shape(format!(
                "mode set horizon {} does not match scenario horizon {}",
                self.t_plus(),
                scn.t_plus
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    units: serde_json::Value,
}

fn write_jsonl<T: Serialize>(
    mut w: impl Write,
    version: &str,
    units: serde_json::Value,
    records: &[T],
) -> Result<()> {
    let header = Header { version: version.to_string(), units };
    let line = serde_json::to_string(&header)
        .map_err(|e| Error::invalid(format!("header encode: {e}")))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    for r in records {
        let line =
            serde_json::to_string(r).map_err(|e| Error::invalid(format!("record encode: {e}")))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(
    r: impl BufRead,
    origin: &str,
    version: &'static str,
    check: impl Fn(&T) -> Result<()>,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut saw_header = false;
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            let header: Header = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: lineno,
                msg: format!("header: {e}"),
            })?;
            if header.version != version {
                return Err(Error::Version {
                    path: origin.to_string(),
                    expected: version,
                    found: header.version,
                });
            }
            saw_header = true;
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
        check(&record).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    if !saw_header {
        return Err(Error::Parse {
            path: origin.to_string(),
            line: 1,
            msg: "missing header record".into(),
        });
    }
    Ok(out)
}

pub fn write_scenarios_to(w: impl Write, scenarios: &[Scenario]) -> Result<()> {
    for s in scenarios {
        s.validate()?;
    }
    write_jsonl(
        w,
        SCENARIO_VERSION,
        serde_json::json!({"position": "m", "sample_rate": "Hz"}),
        scenarios,
    )
}

pub fn write_scenarios(path: impl AsRef<Path>, scenarios: &[Scenario]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    write_scenarios_to(&mut w, scenarios)?;
    w.flush()?;
    Ok(())
}

pub fn read_scenarios_from(r: impl BufRead, origin: &str) -> Result<Vec<Scenario>> {
    read_jsonl(r, origin, SCENARIO_VERSION, Scenario::validate)
}

pub fn read_scenarios(path: impl AsRef<Path>) -> Result<Vec<Scenario>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_scenarios_from(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn write_modes_to(w: impl Write, modes: &[ModeSet]) -> Result<()> {
    for m in modes {
        m.validate()?;
    }
    write_jsonl(w, MODES_VERSION, serde_json::json!({"position": "m"}), modes)
}

pub fn write_modes(path: impl AsRef<Path>, modes: &[ModeSet]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    write_modes_to(&mut w, modes)?;
    w.flush()?;
    Ok(())
}

pub fn read_modes_from(r: impl BufRead, origin: &str) -> Result<Vec<ModeSet>> {
    read_jsonl(r, origin, MODES_VERSION, ModeSet::validate)
}

pub fn read_modes(path: impl AsRef<Path>) -> Result<Vec<ModeSet>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_modes_from(std::io::BufReader::new(file), &path.display().to_string())
}
