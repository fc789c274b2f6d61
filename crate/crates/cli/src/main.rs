use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rcl_cli::commands::{dispatch, Command, RunError};
use rcl_cli::config::parse_config;
use rcl_core::error::ErrorKind;

#[derive(Debug, Parser)]
#[command(name = "rcl", version, about = "Recursive-utility control toolkit")]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 0 uses all cores. Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Overrides `RCL_SEED` and the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn env_seed() -> Result<Option<u64>, String> {
    match std::env::var("RCL_SEED") {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| format!("RCL_SEED is not an unsigned integer: {s:?}")),
        Err(_) => Ok(None),
    }
}

fn code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Check => 1,
        ErrorKind::Config | ErrorKind::Io => 2,
        ErrorKind::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(args.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let mut cfg = match parse_config(&args.scenario) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let env = match env_seed() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed.or(env) {
        cfg.solver.core.seed = seed;
    }
    match dispatch(args.command, &cfg, &args.out) {
        Ok(o) => {
            println!("{}: {}", args.command.name(), o.summary);
            if o.pass {
                ExitCode::SUCCESS
            } else {
                eprintln!("{} check failed: {}", args.command.name(), o.summary);
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            match *e {
                RunError::Core(ref c) => ExitCode::from(code(c.kind())),
                RunError::Invalid(_) => ExitCode::from(2),
            }
        }
    }
}
