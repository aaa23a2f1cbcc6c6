use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use clickgrad::cli::{run, Command};
use clickgrad::config::RunConfig;

/// Train, evaluate and simulate click models.
#[derive(Debug, Parser)]
#[command(name = "clickgrad", version)]
struct Args {
    /// One of train, evaluate, simulate, em-compare, gradcheck.
    #[arg(value_parser = |s: &str| s.parse::<Command>().map_err(|e| e.to_string()))]
    command: Command,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = RunConfig::load(&args.config).and_then(|cfg| run(args.command, cfg, args.seed, args.out));
    match result {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("clickgrad {}: {e}", args.command);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
