use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use csiguard::pipeline::{self, Layout};
use csiguard::{ExperimentConfig, HarnessError, Result};

/// Perturbation attacks on CSI-based positioning: experiment driver.
#[derive(Debug, Parser)]
#[command(name = "csiguard", version)]
struct Cli {
    /// JSON experiment config; the desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "CSIGUARD_OUT", default_value = "csiguard-out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scene generation.
    Scene {
        #[command(subcommand)]
        action: SceneAction,
    },
    /// Dataset simulation.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Trains every configured positioning model.
    Train,
    /// Attack evaluation.
    Attack {
        #[command(subcommand)]
        action: AttackAction,
    },
    /// Summarizes results.csv into report.json.
    Report,
    /// Runs every stage in order.
    Run,
    /// Prints the effective config as JSON.
    Config,
}

#[derive(Debug, Subcommand)]
enum SceneAction {
    /// Writes scene.json and scene_alt.json.
    Gen,
}

#[derive(Debug, Subcommand)]
enum DatasetAction {
    /// Writes the train, test and surrogate datasets.
    Build,
}

#[derive(Debug, Subcommand)]
enum AttackAction {
    /// Writes results.csv.
    Sweep,
}

fn log(msg: &str) {
    println!("{msg}");
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| HarnessError::Schema(format!("--threads: {e}")))?;
    }
    let layout = Layout::new(&cli.out);
    match cli.command {
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            return Ok(());
        }
        Command::Scene { action: SceneAction::Gen } => pipeline::scene_gen(&cfg, &layout)?,
        Command::Dataset { action: DatasetAction::Build } => pipeline::dataset_build(&cfg, &layout)?,
        Command::Train => {
            pipeline::train_models(&cfg, &layout, log)?;
        }
        Command::Attack { action: AttackAction::Sweep } => {
            pipeline::attack_sweep(&cfg, &layout, log)?;
        }
        Command::Report => print_report(&pipeline::report(&layout)?),
        Command::Run => print_report(&pipeline::run_all(&cfg, &layout, log)?),
    }
    Ok(())
}

fn print_report(report: &csiguard::report::Report) {
    for c in &report.checks {
        let group = match c.adv_trained {
            Some(at) => format!("{} at={at}", c.feature),
            None => c.feature.clone(),
        };
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {} [{group}] {}", c.name, c.detail);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
