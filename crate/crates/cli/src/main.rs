use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedprox_cli::commands::{self, Axis};
use fedprox_cli::CliError;

/// FedProx / FedMSPP optimization laboratory.
#[derive(Parser)]
#[command(name = "fedprox", version)]
struct Cli {
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "FEDPROX_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration; writes trace.csv and summary.json.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write trace.svg.
        #[arg(long)]
        svg: bool,
    },
    /// One run per value along an axis, with the schedule recomputed each time.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the property checks and print one PASS/FAIL line per check.
    Verify { config: PathBuf },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Run { config, out, svg } => commands::cmd_run(config, out, cli.seed, *svg),
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => commands::cmd_sweep(config, *axis, values, out, cli.seed),
        Command::Verify { config } => commands::cmd_verify(config, cli.seed),
    })
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedprox: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
