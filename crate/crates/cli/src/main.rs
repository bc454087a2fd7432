//! `mpf`: staged command-line driver for the micro-expression pipeline.

mod config;
mod ledger;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig, RUN_DIR_ENV};
use stages::{CliError, Runner, Stage, PIPELINE};

#[derive(Parser, Debug)]
#[command(name = "mpf", version, about = "Micro-expression recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides every stage seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `section.key=value`, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus (no-op with an external manifest).
    Synth(Common),
    /// Compute fused flow and frame-difference features.
    Preprocess(Common),
    /// Write the class-balanced magnified training set.
    Magnify(Common),
    /// Triplet pretraining of the generic encoder.
    PretrainGfe(Common),
    /// Classification pretraining of the advanced encoder on the balanced set.
    PretrainAfe(Common),
    /// Episodic training of the fused model.
    Train(Common),
    /// Leave-one-subject-out evaluation.
    Eval(Common),
    /// Hyperparameter sweep over `L` or `gamma`.
    Sweep(Common),
    /// Metric tables and confusion matrices.
    Report(Common),
    /// Every stage in order.
    All(Common),
    /// Print the resolved configuration.
    ShowConfig(Common),
}

fn resolve(c: &Common) -> Result<RunConfig, CliError> {
    let overrides = overrides(c);
    RunConfig::load(&c.config, &overrides).map_err(|e| CliError::Config(e.to_string()))
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        set: c.set.clone(),
        run_dir_env: std::env::var_os(RUN_DIR_ENV).map(PathBuf::from),
    }
}

fn execute(cmd: Command) -> Result<(), CliError> {
    let (common, stages): (Common, Vec<Stage>) = match cmd {
        Command::ShowConfig(c) => {
            print!("{}", resolve(&c)?.to_toml_string());
            return Ok(());
        }
        Command::All(c) => (c, PIPELINE.to_vec()),
        Command::Synth(c) => (c, vec![Stage::Synth]),
        Command::Preprocess(c) => (c, vec![Stage::Preprocess]),
        Command::Magnify(c) => (c, vec![Stage::Magnify]),
        Command::PretrainGfe(c) => (c, vec![Stage::PretrainGfe]),
        Command::PretrainAfe(c) => (c, vec![Stage::PretrainAfe]),
        Command::Train(c) => (c, vec![Stage::Train]),
        Command::Eval(c) => (c, vec![Stage::Eval]),
        Command::Sweep(c) => (c, vec![Stage::Sweep]),
        Command::Report(c) => (c, vec![Stage::Report]),
    };
    let cfg = resolve(&common)?;
    let mut runner = Runner::new(cfg, overrides(&common))?;
    for s in stages {
        runner.run(s)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mpf: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
