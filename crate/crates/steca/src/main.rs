//! Command-line entry point for the trajectory-calibration pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use steca::config::RunConfig;
use steca::pipeline::{self, Stage};
use steca::{exit, io};
use steca_core::ndtw::{dtw_accumulate, ndtw_distance, StepDistance};
use steca_core::policy::{GoalFeatures, SoftmaxPolicy};
use steca_core::training::evaluate_calibration;
use steca_core::trajectory::Trajectory;

#[derive(Parser)]
#[command(name = "steca", about = "Step-level trajectory calibration pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Arguments shared by every stage subcommand.
#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory holding all stage artifacts.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    /// Greedy success and affordance over both task splits.
    Success,
    /// Resumption from stored deviated prefixes.
    Calibration,
    /// Everything, writing the full reports.
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DistanceKind {
    ExactMatch,
    TokenJaccard,
}

impl From<DistanceKind> for StepDistance {
    fn from(kind: DistanceKind) -> StepDistance {
        match kind {
            DistanceKind::ExactMatch => StepDistance::ExactMatch,
            DistanceKind::TokenJaccard => StepDistance::TokenJaccard,
        }
    }
}

#[derive(Args)]
struct NdtwArgs {
    /// First trajectory file (JSONL; the first line is used).
    #[arg(long)]
    a: PathBuf,
    /// Second trajectory file (JSONL; the first line is used).
    #[arg(long)]
    b: PathBuf,
    #[arg(long, value_enum, default_value_t = DistanceKind::ExactMatch)]
    distance: DistanceKind,
    /// Also write the accumulated-cost matrix as CSV.
    #[arg(long)]
    matrix_csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generates the seen and unseen task splits.
    GenTasks(Common),
    /// Plans an expert trajectory for every seen task.
    Expert(Common),
    /// Supervised warm-up on the expert trajectories.
    Warmup(Common),
    /// Samples exploration episodes with the warmed-up policy.
    Explore(Common),
    /// Flags deviated actions along expert prefixes and in failed episodes.
    Detect(Common),
    /// Builds calibrated trajectories for the detected deviations.
    Calibrate(Common),
    /// Assembles the three weighted training datasets.
    BuildDataset(Common),
    /// Reward-weighted training on top of the warm-up checkpoint.
    Train(Common),
    /// Evaluates the warm-up and calibrated policies.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = EvalMode::All)]
        mode: EvalMode,
    },
    /// Normalized DTW distance between two stored trajectories.
    Ndtw(NdtwArgs),
    /// Runs the whole pipeline (or one stage of it).
    Run {
        #[command(flatten)]
        common: Common,
        /// Single stage to run instead of the full pipeline.
        #[arg(long)]
        stage: Option<String>,
        /// First trajectory file, for `--stage ndtw`.
        #[arg(long)]
        a: Option<PathBuf>,
        /// Second trajectory file, for `--stage ndtw`.
        #[arg(long)]
        b: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(error_code(&err) as u8)
        }
    }
}

fn error_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<pipeline::PipelineError>() {
        Some(pe) => pe.exit_code(),
        None => exit::STAGE,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())
        .map_err(|e| anyhow::Error::new(pipeline::PipelineError::Config(format!("{e:#}"))))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run_single(stage: Stage, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    pipeline::run_stage(stage, &cfg, &common.out, false)?;
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenTasks(c) => run_single(Stage::GenTasks, &c),
        Command::Expert(c) => run_single(Stage::Expert, &c),
        Command::Warmup(c) => run_single(Stage::Warmup, &c),
        Command::Explore(c) => run_single(Stage::Explore, &c),
        Command::Detect(c) => run_single(Stage::Detect, &c),
        Command::Calibrate(c) => run_single(Stage::Calibrate, &c),
        Command::BuildDataset(c) => run_single(Stage::BuildDataset, &c),
        Command::Train(c) => run_single(Stage::Train, &c),
        Command::Eval { common, mode } => eval_command(&common, mode),
        Command::Ndtw(args) => ndtw_command(&args),
        Command::Run { common, stage, a, b } => run_command(&common, stage.as_deref(), a, b),
    }
}

fn eval_command(common: &Common, mode: EvalMode) -> Result<()> {
    let cfg = load_config(common)?;
    match mode {
        EvalMode::All | EvalMode::Success => {
            pipeline::run_stage(Stage::Eval, &cfg, &common.out, false)?;
            Ok(())
        }
        EvalMode::Calibration => {
            let suite = pipeline::load_calibration_suite(&common.out)?;
            for (name, file) in [("sft", "params_sft.json"), ("calibrated", "params_final.json")] {
                let params = io::read_checkpoint(&common.out.join(file))?;
                let mut policy = SoftmaxPolicy::new(params, GoalFeatures)?;
                let with = evaluate_calibration(&mut policy, &suite, true)?;
                let without = evaluate_calibration(&mut policy, &suite, false)?;
                println!(
                    "{name}: calibration rate {:.4} with deviated action, {:.4} without ({} prefixes, {} skipped)",
                    with.rate, without.rate, with.evaluated, with.skipped
                );
            }
            Ok(())
        }
    }
}

fn read_first_trajectory(path: &Path) -> Result<Trajectory> {
    let trajs: Vec<Trajectory> = io::read_jsonl(path)?;
    trajs.into_iter().next().with_context(|| format!("{} holds no trajectories", path.display()))
}

fn ndtw_command(args: &NdtwArgs) -> Result<()> {
    let a = read_first_trajectory(&args.a)?;
    let b = read_first_trajectory(&args.b)?;
    let d: StepDistance = args.distance.into();
    let value = ndtw_distance(&a.actions(), &b.actions(), d)?;
    println!("{value}");
    if let Some(csv_path) = &args.matrix_csv {
        let matrix = dtw_accumulate(&a.actions(), &b.actions(), d)?;
        let mut text = String::new();
        for row in &matrix.values {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        io::write_atomic_text(csv_path, &text)?;
    }
    Ok(())
}

fn run_command(
    common: &Common,
    stage: Option<&str>,
    a: Option<PathBuf>,
    b: Option<PathBuf>,
) -> Result<()> {
    match stage {
        None => {
            let cfg = load_config(common)?;
            pipeline::run_pipeline(&cfg, &common.out)?;
            Ok(())
        }
        Some("ndtw") => {
            let (Some(a), Some(b)) = (a, b) else {
                bail!(pipeline::PipelineError::Config(
                    "--stage ndtw needs --a and --b trajectory files".into()
                ));
            };
            ndtw_command(&NdtwArgs { a, b, distance: DistanceKind::ExactMatch, matrix_csv: None })
        }
        Some(name) => match Stage::from_name(name) {
            Some(stage) => run_single(stage, common),
            None => bail!(pipeline::PipelineError::Config(format!("unknown stage '{name}'"))),
        },
    }
}
