use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lotto_cli::{run, CliError, Command, Context, RunOptions};

/// Layer-pruning lottery-ticket experiments on CIFAR-style residual networks.
#[derive(Parser)]
#[command(name = "lotto", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Recompute even when the output directory is up to date.
    #[arg(long)]
    force: bool,
    /// Output root; overrides LOTTO_OUT and report.out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the dense network and keep its checkpoints.
    TrainDense(Common),
    /// Prune blocks of the trained network, rewind and retrain.
    Lth(Common),
    /// Prune blocks at initialization and train the sub-network.
    InitLth(Common),
    /// Compare dense and sub-network on clean, corrupted and external test sets.
    Robustness {
        #[command(flatten)]
        common: Common,
        /// Extra CIFAR-10 binary file to evaluate on; repeatable.
        #[arg(long = "eval")]
        eval: Vec<PathBuf>,
    },
    /// Aggregate manifests into tables, CSV and plots.
    Report {
        #[command(flatten)]
        common: Common,
        /// Manifest files or command directories; defaults to everything under the output root.
        manifests: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("{msg}");
            eprintln!("{}", CliError::validation(msg.lines().next().unwrap_or("invalid usage")).line());
            return ExitCode::from(1);
        }
    };
    let (command, common, opts) = match cli.command {
        Cmd::TrainDense(c) => (Command::TrainDense, c, RunOptions::default()),
        Cmd::Lth(c) => (Command::Lth, c, RunOptions::default()),
        Cmd::InitLth(c) => (Command::InitLth, c, RunOptions::default()),
        Cmd::Robustness { common, eval } => (
            Command::Robustness,
            common,
            RunOptions {
                eval_sets: eval,
                ..Default::default()
            },
        ),
        Cmd::Report { common, manifests } => (
            Command::Report,
            common,
            RunOptions {
                manifests,
                ..Default::default()
            },
        ),
    };
    let opts = RunOptions {
        force: common.force,
        out: common.out,
        ..opts
    };
    let result = Context::load(&common.config, &opts).and_then(|ctx| run(command, &ctx, &opts));
    match result {
        Ok(outcome) => {
            println!(
                "lotto-ok command={} status={} manifest={}",
                command,
                if outcome.reused { "up-to-date" } else { "ran" },
                lotto_cli::manifest::ExperimentManifest::path_in(&outcome.dir).display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
