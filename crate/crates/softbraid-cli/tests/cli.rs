//! Process-level tests: every command is exercised through the real
//! binary so exit codes, file artifacts, and determinism are checked
//! exactly as an operator would see them.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use softbraid::archive::ParameterArchive;
use softbraid::autodiff::Tensor;
use softbraid::refiner::{RefinerConfig, RefinerParams};
use softbraid::scenario::{read_modes, read_scenarios, write_modes, ModeSet};

fn sbr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sbr"))
}

fn run(args: &[&str]) -> Output {
    sbr().args(args).env_remove("SBR_SEED").output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

struct Fixture {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    root: PathBuf,
    scenarios: PathBuf,
    coarse: PathBuf,
    config: PathBuf,
}

/// Small lane-follow/car-follow corpus plus a 2-mode coarse file and a
/// desk-size config.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let gen = root.join("gen");
    assert_ok(&run(&[
        "generate",
        "--count",
        "6",
        "--seed",
        "3",
        "--archetypes",
        "lane_follow,car_follow",
        "--t-minus",
        "4",
        "--t-plus",
        "6",
        "--out",
        gen.to_str().unwrap(),
    ]));
    let coarse_dir = root.join("coarse");
    let scenarios = gen.join("scenarios.sbr");
    assert_ok(&run(&[
        "predict-coarse",
        "--scenarios",
        scenarios.to_str().unwrap(),
        "--k",
        "2",
        "--seed",
        "3",
        "--out",
        coarse_dir.to_str().unwrap(),
    ]));
    let config = root.join("tiny.toml");
    fs::write(
        &config,
        "[refiner]\niterations = 2\nembed_dim = 8\nheads = 2\nlane_points_per_key = 3\npe_bands = 1\n\n[train]\nepochs = 2\nbatch_size = 2\nval_fraction = 0.0\n",
    )
    .unwrap();
    Fixture {
        dir,
        coarse: coarse_dir.join("coarse.sbr"),
        scenarios,
        config,
        root,
    }
}

fn train_into(f: &Fixture, out: &Path, seed: &str) -> Output {
    run(&[
        "train",
        "--scenarios",
        f.scenarios.to_str().unwrap(),
        "--coarse",
        f.coarse.to_str().unwrap(),
        "--config",
        f.config.to_str().unwrap(),
        "--seed",
        seed,
        "--threads",
        "1",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn pipeline_composes_through_files() {
    let f = fixture();
    let run_dir = f.root.join("run");
    assert_ok(&train_into(&f, &run_dir, "5"));
    for name in ["checkpoint.sbr", "train-log.jsonl", "effective-config.toml", "manifest.json"] {
        assert!(run_dir.join(name).exists(), "{name} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .any(|v| v == "checkpoint.sbr"));

    // The echoed config holds the resolved seed and the overrides.
    let echoed = fs::read_to_string(run_dir.join("effective-config.toml")).unwrap();
    assert!(echoed.contains("seed = 5"));
    assert!(echoed.contains("embed_dim = 8"));

    // Every log line parses and epochs count up.
    let log = fs::read_to_string(run_dir.join("train-log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["epoch"], 0);
    assert_eq!(lines[1]["epoch"], 1);
    assert!(lines[0]["train_loss"].as_f64().unwrap().is_finite());

    let ref_dir = f.root.join("ref");
    assert_ok(&run(&[
        "refine",
        "--scenarios",
        f.scenarios.to_str().unwrap(),
        "--coarse",
        f.coarse.to_str().unwrap(),
        "--checkpoint",
        run_dir.join("checkpoint.sbr").to_str().unwrap(),
        "--config",
        f.config.to_str().unwrap(),
        "--out",
        ref_dir.to_str().unwrap(),
    ]));
    let refined = read_modes(ref_dir.join("refined.sbr")).unwrap();
    assert_eq!(refined.len(), 6);

    let report_path = f.root.join("ref/report.json");
    let out = run(&[
        "eval",
        "--scenarios",
        f.scenarios.to_str().unwrap(),
        "--modes",
        ref_dir.join("refined.sbr").to_str().unwrap(),
        "--report",
        report_path.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["avg_min_fde"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["scenarios"].as_array().unwrap().len(), 6);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("avg_min_fde"));
}

#[test]
fn eval_of_ground_truth_scores_zero() {
    let f = fixture();
    let scns = read_scenarios(&f.scenarios).unwrap();
    let gt_modes: Vec<ModeSet> = scns.iter().map(ModeSet::from_gt).collect();
    let gt_path = f.root.join("gt.sbr");
    write_modes(&gt_path, &gt_modes).unwrap();

    let report_path = f.root.join("gt-report.json");
    assert_ok(&run(&[
        "eval",
        "--scenarios",
        f.scenarios.to_str().unwrap(),
        "--modes",
        gt_path.to_str().unwrap(),
        "--report",
        report_path.to_str().unwrap(),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    for key in ["avg_min_fde", "avg_min_ade", "actor_mr", "min_joint_mr"] {
        assert_eq!(report[key].as_f64().unwrap(), 0.0, "{key} must be exactly 0");
    }
}

#[test]
fn zero_checkpoint_refines_to_the_coarse_input() {
    let f = fixture();
    let rcfg: RefinerConfig = {
        let cfg: softbraid_cli::RunConfig =
            toml::from_str(&fs::read_to_string(&f.config).unwrap()).unwrap();
        cfg.refiner
    };
    let scns = read_scenarios(&f.scenarios).unwrap();
    let params = RefinerParams::init(&rcfg, scns[0].t_plus, 0).unwrap();
    let zeros: Vec<Tensor> = params
        .ordered_tensors()
        .into_iter()
        .map(|t| Tensor::zeros(t.rows(), t.cols()))
        .collect();
    let zeroed = RefinerParams::from_ordered_tensors(zeros, rcfg.heads).unwrap();
    let ckpt = f.root.join("zero.sbr");
    zeroed.to_archive(0).save(&ckpt).unwrap();

    let out_dir = f.root.join("zero-ref");
    assert_ok(&run(&[
        "refine",
        "--scenarios",
        f.scenarios.to_str().unwrap(),
        "--coarse",
        f.coarse.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        f.config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let refined = read_modes(out_dir.join("refined.sbr")).unwrap();
    let coarse = read_modes(&f.coarse).unwrap();
    assert_eq!(refined, coarse, "zero head must refine to the exact input");
}

#[test]
fn identical_seeds_produce_byte_identical_artifacts() {
    let f = fixture();
    let a = f.root.join("runA");
    let b = f.root.join("runB");
    assert_ok(&train_into(&f, &a, "11"));
    assert_ok(&train_into(&f, &b, "11"));
    for name in ["checkpoint.sbr", "train-log.jsonl"] {
        let ba = fs::read(a.join(name)).unwrap();
        let bb = fs::read(b.join(name)).unwrap();
        assert_eq!(ba, bb, "{name} differs between identical runs");
    }

    let c = f.root.join("runC");
    assert_ok(&train_into(&f, &c, "12"));
    assert_ne!(
        fs::read(a.join("checkpoint.sbr")).unwrap(),
        fs::read(c.join("checkpoint.sbr")).unwrap(),
        "different seeds must differ"
    );
}

#[test]
fn seed_falls_back_to_environment() {
    let f = fixture();
    let flag_dir = f.root.join("by-flag");
    let env_dir = f.root.join("by-env");
    assert_ok(&run(&[
        "predict-coarse",
        "--scenarios",
        f.scenarios.to_str().unwrap(),
        "--k",
        "2",
        "--seed",
        "9",
        "--out",
        flag_dir.to_str().unwrap(),
    ]));
    let out = sbr()
        .args([
            "predict-coarse",
            "--scenarios",
            f.scenarios.to_str().unwrap(),
            "--k",
            "2",
            "--out",
            env_dir.to_str().unwrap(),
        ])
        .env("SBR_SEED", "9")
        .output()
        .unwrap();
    assert_ok(&out);
    assert_eq!(
        fs::read(flag_dir.join("coarse.sbr")).unwrap(),
        fs::read(env_dir.join("coarse.sbr")).unwrap(),
        "--seed 9 and SBR_SEED=9 must agree"
    );

    // A flag beats the environment.
    let both_dir = f.root.join("by-both");
    let out = sbr()
        .args([
            "predict-coarse",
            "--scenarios",
            f.scenarios.to_str().unwrap(),
            "--k",
            "2",
            "--seed",
            "10",
            "--out",
            both_dir.to_str().unwrap(),
        ])
        .env("SBR_SEED", "9")
        .output()
        .unwrap();
    assert_ok(&out);
    assert_ne!(
        fs::read(flag_dir.join("coarse.sbr")).unwrap(),
        fs::read(both_dir.join("coarse.sbr")).unwrap()
    );

    // A malformed environment seed is a config error.
    let bad = sbr()
        .args([
            "predict-coarse",
            "--scenarios",
            f.scenarios.to_str().unwrap(),
            "--k",
            "2",
            "--out",
            f.root.join("bad-env").to_str().unwrap(),
        ])
        .env("SBR_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 3);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("SBR_SEED"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&run(&["generate", "--nope"])), 2);
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    // Missing a required flag.
    assert_eq!(code(&run(&["generate", "--count", "3"])), 2);
    // Bad enum value for --axis.
    let f = fixture();
    assert_eq!(
        code(&run(&[
            "ablate",
            "--axis",
            "entropy",
            "--scenarios",
            f.scenarios.to_str().unwrap(),
            "--coarse",
            f.coarse.to_str().unwrap(),
            "--out",
            f.root.join("x").to_str().unwrap(),
        ])),
        2
    );
}

#[test]
fn invalid_inputs_exit_three() {
    let f = fixture();

    // Truncated scenario file.
    let bytes = fs::read(&f.scenarios).unwrap();
    let cut = f.root.join("cut.sbr");
    fs::write(&cut, &bytes[..bytes.len() * 2 / 3]).unwrap();
    let out = run(&[
        "predict-coarse",
        "--scenarios",
        cut.to_str().unwrap(),
        "--k",
        "2",
        "--out",
        f.root.join("cut-out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cut.sbr"));

    // Unknown config key names the field.
    let bad_cfg = f.root.join("bad.toml");
    fs::write(&bad_cfg, "[refiner]\nblip = 4\n").unwrap();
    let out = run(&[
        "train",
        "--scenarios",
        f.scenarios.to_str().unwrap(),
        "--coarse",
        f.coarse.to_str().unwrap(),
        "--config",
        bad_cfg.to_str().unwrap(),
        "--out",
        f.root.join("bad-out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("blip"));

    // Mismatched scenario/mode counts.
    let coarse = read_modes(&f.coarse).unwrap();
    let short = f.root.join("short.sbr");
    write_modes(&short, &coarse[..3]).unwrap();
    let out = run(&[
        "eval",
        "--scenarios",
        f.scenarios.to_str().unwrap(),
        "--modes",
        short.to_str().unwrap(),
        "--report",
        f.root.join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);

    // Checkpoint incompatible with the configured width.
    let rcfg = RefinerConfig { embed_dim: 16, heads: 2, ..RefinerConfig::default() };
    let scns = read_scenarios(&f.scenarios).unwrap();
    let other = RefinerParams::init(&rcfg, scns[0].t_plus, 1).unwrap();
    let ckpt = f.root.join("wide.sbr");
    other.to_archive(0).save(&ckpt).unwrap();
    let out = run(&[
        "refine",
        "--scenarios",
        f.scenarios.to_str().unwrap(),
        "--coarse",
        f.coarse.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        f.config.to_str().unwrap(),
        "--out",
        f.root.join("wide-out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // Missing file.
    let out = run(&[
        "eval",
        "--scenarios",
        f.root.join("ghost.sbr").to_str().unwrap(),
        "--modes",
        f.coarse.to_str().unwrap(),
        "--report",
        f.root.join("r2.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn ablate_tabulates_one_row_per_value() {
    let f = fixture();
    let out_dir = f.root.join("ablate");
    let out = run(&[
        "ablate",
        "--axis",
        "iterations",
        "--values",
        "1,2,3",
        "--scenarios",
        f.scenarios.to_str().unwrap(),
        "--coarse",
        f.coarse.to_str().unwrap(),
        "--config",
        f.config.to_str().unwrap(),
        "--seeds",
        "4,5",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);

    let mean = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = mean.lines().collect();
    assert_eq!(lines[0], "value,avg_min_fde,avg_min_ade,actor_mr,min_joint_mr");
    assert_eq!(lines.len(), 4, "header plus one row per value:\n{mean}");
    assert!(lines[1].starts_with("1,"));
    assert!(lines[3].starts_with("3,"));
    for row in &lines[1..] {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 5);
        for v in &fields[1..] {
            let x: f64 = v.parse().unwrap();
            assert!(x.is_finite() && x >= 0.0);
        }
    }

    let detail = fs::read_to_string(out_dir.join("ablation-by-seed.csv")).unwrap();
    let detail_lines: Vec<&str> = detail.lines().collect();
    assert_eq!(detail_lines[0], "value,seed,avg_min_fde,avg_min_ade,actor_mr,min_joint_mr");
    assert_eq!(detail_lines.len(), 1 + 3 * 2, "two seeds per value:\n{detail}");
    assert!(detail_lines[1].starts_with("1,4,"));
    assert!(detail_lines[2].starts_with("1,5,"));

    // The mean row is the exact average of the per-seed rows.
    let d1: f64 = detail_lines[1].split(',').nth(2).unwrap().parse().unwrap();
    let d2: f64 = detail_lines[2].split(',').nth(2).unwrap().parse().unwrap();
    let m1: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert!((m1 - (d1 + d2) / 2.0).abs() < 1e-5);

    // Stdout repeats the mean table for piping.
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("value,avg_min_fde"));
}

#[test]
fn checkpoint_archive_round_trips_through_disk() {
    let f = fixture();
    let run_dir = f.root.join("roundtrip");
    assert_ok(&train_into(&f, &run_dir, "7"));
    let archive = ParameterArchive::load(run_dir.join("checkpoint.sbr")).unwrap();
    let params = RefinerParams::from_archive(&archive, 2).unwrap();
    assert_eq!(params.embed_dim(), 8);
    assert!(archive.get("opt.m.enc.l1.w").is_some(), "optimizer state travels in the checkpoint");
}
