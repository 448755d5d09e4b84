use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use unisub::persist::{report, run_all, run_stage, ExperimentConfig, Runner, Stage};
use unisub::Result;

#[derive(Parser)]
#[command(name = "unisub", about = "Unified subspace analysis of delta-tuning methods")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one pipeline stage, or every configured stage with `--stage all`.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage: String,
    },
    /// Write the combined results table of a finished run.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the built-in desk configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, stage } => {
            let cfg = ExperimentConfig::load(&config)?;
            if stage == "all" {
                run_all(&cfg)
            } else {
                run_stage(&cfg, stage.parse::<Stage>()?)
            }
        }
        Command::Report { out, config } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            let runner = Runner::new(&cfg)?;
            let tables = report::collect_tables(&runner)?;
            report::write_combined(&tables, File::create(&out)?)
        }
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.category(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
