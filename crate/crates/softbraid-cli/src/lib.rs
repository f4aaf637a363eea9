//! Implementation of the `sbr` command set.
//!
//! Every command composes through files: scenarios and mode sets in
//! their line-delimited formats, checkpoints as parameter archives.
//! Commands that take `--out` echo the merged effective config and a
//! manifest of produced files into that directory, so any run can be
//! reproduced from its artifacts alone.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use softbraid::archive::ParameterArchive;
use softbraid::error::{Error, Result};
use softbraid::generator::{self, Archetype, GeneratorDims};
use softbraid::metrics::{self, MetricReport};
use softbraid::refiner::{refine, RefinerConfig, RefinerParams, TopologyMode};
use softbraid::scenario::{read_modes, read_scenarios, write_modes, write_scenarios, ModeSet, Scenario};
use softbraid::train::{train, EpochLog, TrainConfig};

/// Merged run settings: config file values overridden by flags. The
/// resolved seed replaces `train.seed` so one number drives the run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub dims: GeneratorDims,
    pub refiner: RefinerConfig,
    pub train: TrainConfig,
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// Seed precedence: flag, then config file, then SBR_SEED, then 0.
pub fn resolve_seed(flag: Option<u64>, from_config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(from_config) {
        return Ok(s);
    }
    match std::env::var("SBR_SEED") {
        Ok(raw) => raw.trim().parse().map_err(|_| {
            Error::config(format!("SBR_SEED must be an unsigned integer, got {raw:?}"))
        }),
        Err(_) => Ok(0),
    }
}

/// Exit code class of an error: numeric failures are 4, everything
/// else that reaches this point failed while reading or validating
/// inputs and is 3. Usage errors exit 2 in the argument parser.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric { .. } => 4,
        _ => 3,
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: Option<u64>,
    inputs: Vec<(&'a str, String)>,
    outputs: Vec<&'a str>,
}

/// Writes `effective-config.toml` and `manifest.json` under `out`.
fn echo_run(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[(&str, &Path)],
    outputs: &[&str],
) -> Result<()> {
    let toml_text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::config(format!("could not serialize effective config: {e}")))?;
    fs::write(out.join("effective-config.toml"), toml_text)?;
    let mut outputs: Vec<&str> = outputs.to_vec();
    outputs.push("effective-config.toml");
    let manifest = Manifest {
        command,
        seed: cfg.seed,
        inputs: inputs
            .iter()
            .map(|(k, p)| (*k, p.display().to_string()))
            .collect(),
        outputs,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::config(format!("could not serialize manifest: {e}")))?;
    fs::write(out.join("manifest.json"), json + "\n")?;
    Ok(())
}

fn read_paired(
    scenarios: &Path,
    modes: &Path,
) -> Result<(Vec<Scenario>, Vec<ModeSet>)> {
    let scns = read_scenarios(scenarios)?;
    let mode_sets = read_modes(modes)?;
    if scns.len() != mode_sets.len() {
        return Err(Error::shape(format!(
            "{} holds {} scenarios but {} holds {} mode sets",
            scenarios.display(),
            scns.len(),
            modes.display(),
            mode_sets.len()
        )));
    }
    Ok((scns, mode_sets))
}

pub struct GenerateArgs {
    pub count: usize,
    pub seed: Option<u64>,
    pub archetypes: Vec<Archetype>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub n_min: Option<usize>,
    pub n_max: Option<usize>,
    pub t_minus: Option<usize>,
    pub t_plus: Option<usize>,
    pub sample_rate: Option<f64>,
}

pub fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let seed = resolve_seed(a.seed, cfg.seed)?;
    cfg.seed = Some(seed);
    cfg.train.seed = seed;
    if let Some(v) = a.n_min {
        cfg.dims.n_min = v;
    }
    if let Some(v) = a.n_max {
        cfg.dims.n_max = v;
    }
    if let Some(v) = a.t_minus {
        cfg.dims.t_minus = v;
    }
    if let Some(v) = a.t_plus {
        cfg.dims.t_plus = v;
    }
    if let Some(v) = a.sample_rate {
        cfg.dims.sample_rate = v;
    }
    let scns = generator::generate(&a.archetypes, a.count, seed, &cfg.dims)?;
    fs::create_dir_all(&a.out)?;
    write_scenarios(a.out.join("scenarios.sbr"), &scns)?;
    echo_run(&a.out, "generate", &cfg, &[], &["scenarios.sbr"])?;
    println!(
        "wrote {} scenarios to {}",
        scns.len(),
        a.out.join("scenarios.sbr").display()
    );
    Ok(())
}

pub struct PredictCoarseArgs {
    pub scenarios: PathBuf,
    pub k: usize,
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn cmd_predict_coarse(a: PredictCoarseArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let seed = resolve_seed(a.seed, cfg.seed)?;
    cfg.seed = Some(seed);
    cfg.train.seed = seed;
    let scns = read_scenarios(&a.scenarios)?;
    let modes = generator::coarse_predict_all(&scns, a.k, seed)?;
    fs::create_dir_all(&a.out)?;
    write_modes(a.out.join("coarse.sbr"), &modes)?;
    echo_run(
        &a.out,
        "predict-coarse",
        &cfg,
        &[("scenarios", &a.scenarios)],
        &["coarse.sbr"],
    )?;
    println!(
        "wrote {}-mode coarse predictions for {} scenarios to {}",
        a.k,
        scns.len(),
        a.out.join("coarse.sbr").display()
    );
    Ok(())
}

pub struct TrainArgs {
    pub scenarios: PathBuf,
    pub coarse: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub epochs: Option<usize>,
}

pub fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let seed = resolve_seed(a.seed, cfg.seed)?;
    cfg.seed = Some(seed);
    cfg.train.seed = seed;
    if let Some(t) = a.threads {
        cfg.train.threads = t;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let (scns, modes) = read_paired(&a.scenarios, &a.coarse)?;
    let data: Vec<(Scenario, ModeSet)> = scns.into_iter().zip(modes).collect();

    fs::create_dir_all(&a.out)?;
    let log_file = fs::File::create(a.out.join("train-log.jsonl"))?;
    let mut w = std::io::BufWriter::new(log_file);
    let mut io_err: Option<std::io::Error> = None;
    let mut observer = |e: &EpochLog| {
        if io_err.is_some() {
            return;
        }
        let res = serde_json::to_string(e)
            .map_err(std::io::Error::other)
            .and_then(|line| writeln!(w, "{line}"))
            .and_then(|()| w.flush());
        if let Err(err) = res {
            io_err = Some(err);
        }
    };
    let outcome = train(&data, &cfg.refiner, &cfg.train, &mut observer)?;
    if let Some(err) = io_err {
        return Err(err.into());
    }
    outcome.archive.save(a.out.join("checkpoint.sbr"))?;
    echo_run(
        &a.out,
        "train",
        &cfg,
        &[("scenarios", &a.scenarios), ("coarse", &a.coarse)],
        &["checkpoint.sbr", "train-log.jsonl"],
    )?;
    let last = outcome.log.last().expect("at least one epoch");
    println!(
        "trained {} steps; final train loss {:.6}; checkpoint at {}",
        outcome.steps,
        last.train_loss,
        a.out.join("checkpoint.sbr").display()
    );
    Ok(())
}

pub struct RefineArgs {
    pub scenarios: PathBuf,
    pub coarse: PathBuf,
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn cmd_refine(a: RefineArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let seed = resolve_seed(None, cfg.seed)?;
    cfg.seed = Some(seed);
    cfg.train.seed = seed;
    let (scns, modes) = read_paired(&a.scenarios, &a.coarse)?;
    let archive = ParameterArchive::load(&a.checkpoint)?;
    let params = RefinerParams::from_archive(&archive, cfg.refiner.heads)?;
    let mut refined = Vec::with_capacity(scns.len());
    for (scn, y0) in scns.iter().zip(&modes) {
        let out = refine(&params, scn, y0, &cfg.refiner)?;
        refined.push(out.final_modes().clone());
    }
    fs::create_dir_all(&a.out)?;
    write_modes(a.out.join("refined.sbr"), &refined)?;
    echo_run(
        &a.out,
        "refine",
        &cfg,
        &[
            ("scenarios", &a.scenarios),
            ("coarse", &a.coarse),
            ("checkpoint", &a.checkpoint),
        ],
        &["refined.sbr"],
    )?;
    println!(
        "refined {} scenarios to {}",
        refined.len(),
        a.out.join("refined.sbr").display()
    );
    Ok(())
}

pub struct EvalArgs {
    pub scenarios: PathBuf,
    pub modes: PathBuf,
    pub report: PathBuf,
}

pub fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (scns, modes) = read_paired(&a.scenarios, &a.modes)?;
    let report = metrics::evaluate(&scns, &modes)?;
    if let Some(parent) = a.report.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::config(format!("could not serialize report: {e}")))?;
    fs::write(&a.report, json + "\n")?;
    print_summary(&report);
    Ok(())
}

// Ignores write errors so a closed pipe (e.g. `sbr eval | head`) does not
// turn a finished evaluation into a failure; the report file is already
// on disk by the time this runs.
fn print_summary(report: &MetricReport) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "avg_min_fde  {:.6}", report.avg_min_fde);
    let _ = writeln!(out, "avg_min_ade  {:.6}", report.avg_min_ade);
    let _ = writeln!(out, "actor_mr     {:.6}", report.actor_mr);
    let _ = writeln!(out, "min_joint_mr {:.6}", report.min_joint_mr);
}

/// Ablation sweep axes. All five drive refinement settings; training
/// hyperparameters stay at the configured values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    TopologyMode,
    TopologyUpdate,
    TauA,
    TauL,
    Iterations,
}

impl Axis {
    /// Sweep grid used when --values is omitted.
    pub fn preset_values(self) -> Vec<String> {
        let strs: &[&str] = match self {
            Axis::TopologyMode => &["soft_braid", "braid", "none"],
            Axis::TopologyUpdate => &["true", "false"],
            Axis::TauA => &["10", "30", "50", "100"],
            Axis::TauL => &["2", "5", "10", "20"],
            Axis::Iterations => &["1", "2", "3", "4", "5"],
        };
        strs.iter().map(|s| s.to_string()).collect()
    }

    pub fn apply(self, raw: &str, rcfg: &mut RefinerConfig) -> Result<()> {
        let raw = raw.trim();
        match self {
            Axis::TopologyMode => {
                rcfg.topology_mode = raw.parse::<TopologyMode>()?;
            }
            Axis::TopologyUpdate => {
                rcfg.topology_update = match raw {
                    "true" | "on" | "1" => true,
                    "false" | "off" | "0" => false,
                    other => {
                        return Err(Error::config(format!(
                            "topology_update value must be true or false, got {other:?}"
                        )))
                    }
                };
            }
            Axis::TauA => {
                rcfg.tau_a = parse_f64(raw, "tau_a")?;
            }
            Axis::TauL => {
                rcfg.tau_l = parse_f64(raw, "tau_l")?;
            }
            Axis::Iterations => {
                rcfg.iterations = raw.parse().map_err(|_| {
                    Error::config(format!("iterations value must be a positive integer, got {raw:?}"))
                })?;
            }
        }
        rcfg.validate()
    }
}

fn parse_f64(raw: &str, field: &str) -> Result<f64> {
    raw.parse()
        .map_err(|_| Error::config(format!("{field} value must be a number, got {raw:?}")))
}

pub struct AblateArgs {
    pub axis: Axis,
    pub values: Vec<String>,
    pub scenarios: PathBuf,
    pub coarse: PathBuf,
    pub test_scenarios: Option<PathBuf>,
    pub test_coarse: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub threads: Option<usize>,
}

struct SweepRow {
    value: String,
    seed: u64,
    report: MetricReport,
}

pub fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let seed = resolve_seed(None, cfg.seed)?;
    cfg.seed = Some(seed);
    cfg.train.seed = seed;
    if let Some(t) = a.threads {
        cfg.train.threads = t;
    }
    let values = if a.values.is_empty() {
        a.axis.preset_values()
    } else {
        a.values.clone()
    };
    let seeds = if a.seeds.is_empty() { vec![seed] } else { a.seeds.clone() };

    let (train_scns, train_modes) = read_paired(&a.scenarios, &a.coarse)?;
    let data: Vec<(Scenario, ModeSet)> =
        train_scns.into_iter().zip(train_modes).collect();
    let (test_scns, test_modes) = match (&a.test_scenarios, &a.test_coarse) {
        (Some(s), Some(m)) => read_paired(s, m)?,
        (None, None) => {
            let scns: Vec<Scenario> = data.iter().map(|(s, _)| s.clone()).collect();
            let modes: Vec<ModeSet> = data.iter().map(|(_, m)| m.clone()).collect();
            (scns, modes)
        }
        _ => {
            return Err(Error::config(
                "--test-scenarios and --test-coarse must be given together",
            ))
        }
    };

    let mut rows: Vec<SweepRow> = Vec::new();
    for value in &values {
        let mut rcfg = cfg.refiner.clone();
        a.axis.apply(value, &mut rcfg)?;
        for &s in &seeds {
            let mut tcfg = cfg.train.clone();
            tcfg.seed = s;
            let outcome = train(&data, &rcfg, &tcfg, &mut |_| {})?;
            let mut refined = Vec::with_capacity(test_scns.len());
            for (scn, y0) in test_scns.iter().zip(&test_modes) {
                let out = refine(&outcome.params, scn, y0, &rcfg)?;
                refined.push(out.final_modes().clone());
            }
            let report = metrics::evaluate(&test_scns, &refined)?;
            rows.push(SweepRow { value: value.clone(), seed: s, report });
        }
    }

    fs::create_dir_all(&a.out)?;
    let mut mean_csv = String::from("value,avg_min_fde,avg_min_ade,actor_mr,min_joint_mr\n");
    for value in &values {
        let group: Vec<&SweepRow> = rows.iter().filter(|r| &r.value == value).collect();
        let n = group.len() as f64;
        let mean = |f: &dyn Fn(&MetricReport) -> f64| -> f64 {
            group.iter().map(|r| f(&r.report)).sum::<f64>() / n
        };
        mean_csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            value,
            mean(&|r| r.avg_min_fde),
            mean(&|r| r.avg_min_ade),
            mean(&|r| r.actor_mr),
            mean(&|r| r.min_joint_mr),
        ));
    }
    fs::write(a.out.join("ablation.csv"), &mean_csv)?;

    let mut seed_csv = String::from("value,seed,avg_min_fde,avg_min_ade,actor_mr,min_joint_mr\n");
    for r in &rows {
        seed_csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.value, r.seed, r.report.avg_min_fde, r.report.avg_min_ade, r.report.actor_mr, r.report.min_joint_mr,
        ));
    }
    fs::write(a.out.join("ablation-by-seed.csv"), &seed_csv)?;

    let mut inputs: Vec<(&str, &Path)> =
        vec![("scenarios", a.scenarios.as_path()), ("coarse", a.coarse.as_path())];
    if let (Some(s), Some(m)) = (&a.test_scenarios, &a.test_coarse) {
        inputs.push(("test-scenarios", s));
        inputs.push(("test-coarse", m));
    }
    echo_run(&a.out, "ablate", &cfg, &inputs, &["ablation.csv", "ablation-by-seed.csv"])?;
    print!("{mean_csv}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence_and_exit_codes() {
        assert_eq!(resolve_seed(Some(7), Some(3)).unwrap(), 7);
        assert_eq!(resolve_seed(None, Some(3)).unwrap(), 3);
        // Env fallback is exercised in the process-level tests; unset
        // here it falls back to 0.
        if std::env::var("SBR_SEED").is_err() {
            assert_eq!(resolve_seed(None, None).unwrap(), 0);
        }

        assert_eq!(exit_code(&Error::config("x")), 3);
        assert_eq!(exit_code(&Error::invalid("x")), 3);
        assert_eq!(exit_code(&Error::shape("x")), 3);
        assert_eq!(
            exit_code(&Error::Numeric { step: 4, msg: "diverged".into() }),
            4
        );
        assert_eq!(
            exit_code(&Error::Version {
                path: "f".into(),
                expected: "sbr-scn-v1",
                found: "sbr-scn-v9".into()
            }),
            3
        );
    }

    #[test]
    fn run_config_rejects_unknown_keys_and_round_trips() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);

        let err = toml::from_str::<RunConfig>("mystery = 1").unwrap_err();
        assert!(err.to_string().contains("mystery"));
        let err = toml::from_str::<RunConfig>("[refiner]\nwidth = 4").unwrap_err();
        assert!(err.to_string().contains("width"));
        let err = toml::from_str::<RunConfig>("[train]\nmomentum = 0.9").unwrap_err();
        assert!(err.to_string().contains("momentum"));

        let partial: RunConfig = toml::from_str("seed = 11\n[refiner]\niterations = 2").unwrap();
        assert_eq!(partial.seed, Some(11));
        assert_eq!(partial.refiner.iterations, 2);
        assert_eq!(partial.refiner.embed_dim, RefinerConfig::default().embed_dim);
    }

    #[test]
    fn axis_presets_and_application() {
        assert_eq!(Axis::TauA.preset_values(), vec!["10", "30", "50", "100"]);
        assert_eq!(Axis::TauL.preset_values(), vec!["2", "5", "10", "20"]);
        assert_eq!(Axis::Iterations.preset_values().len(), 5);
        assert_eq!(Axis::TopologyMode.preset_values().len(), 3);

        let mut rcfg = RefinerConfig::default();
        Axis::TopologyMode.apply("braid", &mut rcfg).unwrap();
        assert_eq!(rcfg.topology_mode, TopologyMode::Braid);
        Axis::TopologyUpdate.apply("false", &mut rcfg).unwrap();
        assert!(!rcfg.topology_update);
        Axis::TauA.apply("30", &mut rcfg).unwrap();
        assert_eq!(rcfg.tau_a, 30.0);
        Axis::Iterations.apply("4", &mut rcfg).unwrap();
        assert_eq!(rcfg.iterations, 4);

        assert!(Axis::TopologyMode.apply("möbius", &mut rcfg).is_err());
        assert!(Axis::Iterations.apply("0", &mut rcfg).is_err());
        assert!(Axis::TauA.apply("-3", &mut rcfg).is_err());
    }
}
