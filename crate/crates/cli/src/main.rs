use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use marketplace::experiment::{CONCURRENCY_ENV, SEED_ENV};
use marketplace_bench::commands::{self, Overrides};

#[derive(Parser)]
#[command(name = "marketplace-bench", version, about = "Marketplace consistency benchmark")]
struct Cli {
    /// Overrides workload.seed.
    #[arg(long, global = true, env = SEED_ENV)]
    seed: Option<u64>,
    /// Overrides workload.concurrency_level.
    #[arg(long, global = true, env = CONCURRENCY_ENV)]
    concurrency: Option<u32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the services over HTTP/JSON.
    Serve {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Run several specs on one seed and dataset and print a table.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        spec: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let overrides = Overrides {
        seed: cli.seed,
        concurrency: cli.concurrency,
    };
    let code = match cli.command {
        Command::Run { spec, out } => commands::run(&spec, out.as_deref(), overrides),
        Command::Serve { spec, port } => commands::serve(&spec, port, overrides),
        Command::Compare { spec } => commands::compare(&spec, overrides),
    };
    ExitCode::from(u8::try_from(code).unwrap_or(1))
}
