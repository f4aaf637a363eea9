//! Browser bindings for the refinement demo page.
//!
//! The exported surface is three JSON-string operations: draw a fresh
//! scenario with coarse candidates, inspect its topology under chosen
//! radii, and refine the candidates with a small checkpoint trained
//! offline and embedded in the module. Core logic lives in plain
//! functions so the same code is testable on the host target.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use softbraid::archive::ParameterArchive;
use softbraid::error::{Error, Result};
use softbraid::generator::{coarse_predict, generate, Archetype, GeneratorDims};
use softbraid::refiner::{refine, topology_snapshot, ModeTopology, RefinerConfig, RefinerParams};
use softbraid::scenario::{ModeSet, Scenario};

/// Checkpoint trained by `sbr train` with configs/demo.toml; regenerate
/// with scripts in the repository root if the demo config changes.
static DEMO_CHECKPOINT: &[u8] = include_bytes!("../assets/demo-checkpoint.sbr");

/// Must mirror the [refiner] table of configs/demo.toml; the embedded
/// checkpoint was trained under it and the test suite pins agreement.
pub fn demo_config() -> RefinerConfig {
    RefinerConfig {
        embed_dim: 16,
        heads: 2,
        pe_bands: 2,
        ..RefinerConfig::default()
    }
}

fn demo_dims() -> GeneratorDims {
    GeneratorDims::default()
}

#[derive(Serialize)]
struct ScenePayload {
    scenario: Scenario,
    coarse: ModeSet,
}

#[derive(Serialize)]
struct RefinePayload {
    iterations: Vec<ModeSet>,
    topologies: Vec<Vec<ModeTopology>>,
}

fn parse_scenario(json: &str) -> Result<Scenario> {
    let scn: Scenario =
        serde_json::from_str(json).map_err(|e| Error::invalid(format!("scenario: {e}")))?;
    scn.validate()?;
    Ok(scn)
}

fn parse_modes(json: &str, scn: &Scenario) -> Result<ModeSet> {
    let modes: ModeSet =
        serde_json::from_str(json).map_err(|e| Error::invalid(format!("modes: {e}")))?;
    modes.validate_against(scn)?;
    Ok(modes)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::invalid(format!("encode: {e}")))
}

/// One seeded scenario of the given archetype plus K coarse candidate
/// futures, as {"scenario": ..., "coarse": ...}.
pub fn scene_json(archetype: &str, k: usize, seed: u64) -> Result<String> {
    let archetype: Archetype = archetype.parse()?;
    let scns = generate(&[archetype], 1, seed, &demo_dims())?;
    let scenario = scns.into_iter().next().expect("one scenario");
    let coarse = coarse_predict(&scenario, k, seed)?;
    to_json(&ScenePayload { scenario, coarse })
}

/// Per-mode topology of the candidates under the given radii and mode,
/// as a JSON list with one record per candidate world.
pub fn topology_json(
    scenario_json: &str,
    modes_json: &str,
    tau_a: f64,
    tau_l: f64,
    mode: &str,
) -> Result<String> {
    let scn = parse_scenario(scenario_json)?;
    let modes = parse_modes(modes_json, &scn)?;
    let cfg = RefinerConfig {
        tau_a,
        tau_l,
        topology_mode: mode.parse()?,
        ..demo_config()
    };
    let topo = topology_snapshot(&scn, &modes, &cfg)?;
    to_json(&topo)
}

/// Runs the embedded checkpoint on the candidates and returns every
/// iteration's output plus the topology each consumed.
pub fn refine_json(scenario_json: &str, modes_json: &str) -> Result<String> {
    let scn = parse_scenario(scenario_json)?;
    let modes = parse_modes(modes_json, &scn)?;
    let cfg = demo_config();
    let archive = ParameterArchive::read_from(DEMO_CHECKPOINT, "embedded checkpoint")?;
    let params = RefinerParams::from_archive(&archive, cfg.heads)?;
    let out = refine(&params, &scn, &modes, &cfg)?;
    to_json(&RefinePayload { iterations: out.iterations, topologies: out.topologies })
}

fn err_js(e: Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen]
pub fn demo_scene(archetype: &str, k: u32, seed: u32) -> std::result::Result<String, JsValue> {
    scene_json(archetype, k as usize, seed as u64).map_err(err_js)
}

#[wasm_bindgen]
pub fn demo_topology(
    scenario_json: &str,
    modes_json: &str,
    tau_a: f64,
    tau_l: f64,
    mode: &str,
) -> std::result::Result<String, JsValue> {
    topology_json(scenario_json, modes_json, tau_a, tau_l, mode).map_err(err_js)
}

#[wasm_bindgen]
pub fn demo_refine(
    scenario_json: &str,
    modes_json: &str,
) -> std::result::Result<String, JsValue> {
    refine_json(scenario_json, modes_json).map_err(err_js)
}
