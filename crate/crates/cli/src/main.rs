use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssmkit_cli::commands;
use ssmkit_cli::config::{RunConfig, WORKERS_ENV};
use ssmkit_cli::CliError;

#[derive(Parser)]
#[command(name = "ssmkit", version, about = "Train, verify and benchmark structured state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set model.core.kind=lru`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads.
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the property suites and write report.json.
    Verify(Common),
    /// Train on the configured task; writes metrics.jsonl, checkpoint.json and report.json.
    Train(Common),
    /// Evaluate a checkpoint on its test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load; defaults to OUT/checkpoint.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time the recurrence, scan and convolution engines; writes bench.csv.
    Bench(Common),
    /// Write eigenvalue scatter CSVs and the feature table.
    Figure(Common),
    /// Write the resolved configuration to OUT/config.json.
    Init(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let load = |c: &Common| RunConfig::load(c.config.as_deref(), &c.sets);
    match cli.command {
        Command::Verify(c) => {
            let cfg = load(&c)?;
            let report = commands::cmd_verify(&cfg, &c.out, cfg.resolve_workers(c.workers));
            if let Ok(r) = &report {
                println!("{}", serde_json::to_string_pretty(r)?);
            }
            report.map(|_| ())
        }
        Command::Train(c) => {
            let cfg = load(&c)?;
            commands::cmd_train(&cfg, &c.out, cfg.resolve_workers(c.workers)).map(|_| ())
        }
        Command::Eval { common, checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| common.out.join("checkpoint.json"));
            let workers = common.workers.filter(|&w| w > 0).unwrap_or(1);
            commands::cmd_eval(&path, &common.out, workers).map(|_| ())
        }
        Command::Bench(c) => {
            let cfg = load(&c)?;
            let r = commands::cmd_bench(&cfg, &c.out)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(())
        }
        Command::Figure(c) => commands::cmd_figure(&load(&c)?, &c.out).map(|_| ()),
        Command::Init(c) => commands::cmd_init(&load(&c)?, &c.out).map(|_| ()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
