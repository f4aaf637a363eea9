use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use softbraid::generator::Archetype;
use softbraid_cli::{
    cmd_ablate, cmd_eval, cmd_generate, cmd_predict_coarse, cmd_refine, cmd_train, exit_code,
    AblateArgs, Axis, EvalArgs, GenerateArgs, PredictCoarseArgs, RefineArgs, TrainArgs,
};

/// Soft-braid trajectory refinement toolkit.
#[derive(Parser)]
#[command(name = "sbr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic traffic scenarios.
    Generate {
        /// Number of scenarios.
        #[arg(long)]
        count: usize,
        /// Seed; falls back to config file, then SBR_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated archetype mix.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "crossing,yielding,merging,lane_follow,car_follow"
        )]
        archetypes: Vec<Archetype>,
        /// TOML run config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_min: Option<usize>,
        #[arg(long)]
        n_max: Option<usize>,
        #[arg(long)]
        t_minus: Option<usize>,
        #[arg(long)]
        t_plus: Option<usize>,
        #[arg(long)]
        sample_rate: Option<f64>,
    },
    /// Constant-velocity multi-mode predictions for a scenario file.
    PredictCoarse {
        #[arg(long)]
        scenarios: PathBuf,
        /// Modes per scenario.
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the refiner on scenarios plus coarse predictions.
    Train {
        #[arg(long)]
        scenarios: PathBuf,
        /// Coarse mode-set file aligned with --scenarios.
        #[arg(long)]
        coarse: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Scenario-level worker threads; results are identical for
        /// any value.
        #[arg(long)]
        threads: Option<usize>,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Refine coarse predictions with a trained checkpoint.
    Refine {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        coarse: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Must carry the refiner settings the checkpoint was trained
        /// with.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        scenarios: PathBuf,
        /// Mode-set file to score.
        #[arg(long)]
        modes: PathBuf,
        /// Report file (JSON).
        #[arg(long)]
        report: PathBuf,
    },
    /// Train/evaluate once per axis value and tabulate metrics.
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated axis values; defaults to the preset grid.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        coarse: PathBuf,
        /// Held-out evaluation set; defaults to the training files.
        #[arg(long, requires = "test_coarse")]
        test_scenarios: Option<PathBuf>,
        #[arg(long, requires = "test_scenarios")]
        test_coarse: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated training seeds; metrics are averaged over
        /// them. Defaults to the run seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    #[value(name = "topology_mode")]
    TopologyMode,
    #[value(name = "topology_update")]
    TopologyUpdate,
    #[value(name = "tau_a")]
    TauA,
    #[value(name = "tau_l")]
    TauL,
    #[value(name = "iterations")]
    Iterations,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Axis {
        match a {
            AxisArg::TopologyMode => Axis::TopologyMode,
            AxisArg::TopologyUpdate => Axis::TopologyUpdate,
            AxisArg::TauA => Axis::TauA,
            AxisArg::TauL => Axis::TauL,
            AxisArg::Iterations => Axis::Iterations,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Generate {
            count,
            seed,
            archetypes,
            config,
            out,
            n_min,
            n_max,
            t_minus,
            t_plus,
            sample_rate,
        } => cmd_generate(GenerateArgs {
            count,
            seed,
            archetypes,
            config,
            out,
            n_min,
            n_max,
            t_minus,
            t_plus,
            sample_rate,
        }),
        Cmd::PredictCoarse { scenarios, k, seed, config, out } => {
            cmd_predict_coarse(PredictCoarseArgs { scenarios, k, seed, config, out })
        }
        Cmd::Train { scenarios, coarse, config, out, seed, threads, epochs } => {
            cmd_train(TrainArgs { scenarios, coarse, config, out, seed, threads, epochs })
        }
        Cmd::Refine { scenarios, coarse, checkpoint, config, out } => {
            cmd_refine(RefineArgs { scenarios, coarse, checkpoint, config, out })
        }
        Cmd::Eval { scenarios, modes, report } => cmd_eval(EvalArgs { scenarios, modes, report }),
        Cmd::Ablate {
            axis,
            values,
            scenarios,
            coarse,
            test_scenarios,
            test_coarse,
            config,
            out,
            seeds,
            threads,
        } => cmd_ablate(AblateArgs {
            axis: axis.into(),
            values,
            scenarios,
            coarse,
            test_scenarios,
            test_coarse,
            config,
            out,
            seeds,
            threads,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
