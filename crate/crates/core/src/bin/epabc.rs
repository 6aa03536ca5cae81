use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use epabc::harness::{self, HarnessError};

/// Caps the rayon worker count.
const MAX_WORKERS_ENV: &str = "EPABC_MAX_WORKERS";

#[derive(Parser)]
#[command(name = "epabc", version, about = "EP with local ABC site updates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run EP from a config; writes trace.csv, final.json and acceptance.csv.
    Run { config: PathBuf },
    /// Write a correlation-distance grid CSV.
    Heatmap { config: PathBuf },
    /// Run the config's [compare] section and write compare.csv.
    Compare { config: PathBuf },
}

fn report(err: &HarnessError) {
    let payload = serde_json::json!({
        "error": err.kind(),
        "field": err.field_path(),
        "message": err.to_string(),
    });
    eprintln!("{payload}");
}

fn configure_workers() -> Result<(), String> {
    let Ok(raw) = std::env::var(MAX_WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| format!("{MAX_WORKERS_ENV} must be a positive integer, got {raw:?}"))?;
    if n == 0 {
        return Err(format!("{MAX_WORKERS_ENV} must be positive"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(message) = configure_workers() {
        eprintln!("{}", serde_json::json!({ "error": "environment", "field": MAX_WORKERS_ENV, "message": message }));
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Run { config } => harness::run_from_config(config).map(|r| {
            println!("{}", r.output_dir.display());
        }),
        Command::Heatmap { config } => harness::emit_heatmap(config).map(|p| println!("{}", p.display())),
        Command::Compare { config } => harness::compare_schedules(config).map(|p| println!("{}", p.display())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::FAILURE
        }
    }
}
