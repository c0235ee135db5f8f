use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qholo_cli::commands::{self, Context};
use qholo_cli::{CliError, LoadedConfig};

#[derive(Debug, Parser)]
#[command(name = "qholo", version, about = "SPDC simulation and inverse design of nonlinear crystal holograms")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; must not exist yet.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to continue from (optimize) or to read parameters from.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Forward Monte Carlo at fixed pump and crystal.
    Simulate,
    /// Learn the crystal hologram (and optionally the pump) for a target.
    Optimize,
    /// Convert an exported hologram volume into a ±1 poling pattern.
    Binarize {
        /// Hologram volume written by `optimize` or `export` (`hologram.c64`).
        #[arg(long)]
        hologram: PathBuf,
    },
    /// Adjoint vs finite-difference gradients on a small built-in instance.
    Gradcheck,
    /// Write hologram and pump artifacts for the parameters in `--resume`.
    Export,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(CliError::Schema {
            key: "--threads".into(),
            message: "must be at least 1".into(),
        });
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Io(e.to_string()))?;
    if let Command::Gradcheck = cli.command {
        let out = cli.out.unwrap_or_else(|| PathBuf::from("qholo-gradcheck"));
        let (dir, pass) = commands::run_gradcheck(&out, cli.seed.unwrap_or(0), threads)?;
        println!("{}", dir.display());
        if !pass {
            return Err(CliError::Numerical(qholo::SimError::InvalidParameter(
                "gradient check failed; see gradcheck.txt".into(),
            )));
        }
        return Ok(());
    }
    let path = cli.config.ok_or_else(|| CliError::Schema {
        key: "--config".into(),
        message: "required for this subcommand".into(),
    })?;
    let loaded = LoadedConfig::load(&path, cli.seed)?;
    let out = cli
        .out
        .unwrap_or_else(|| PathBuf::from(&loaded.config.output.directory));
    let ctx = Context {
        loaded,
        out,
        threads,
        resume: cli.resume,
    };
    let dir = match cli.command {
        Command::Simulate => commands::run_simulate(&ctx)?,
        Command::Optimize => commands::run_optimize(&ctx)?,
        Command::Binarize { hologram } => commands::run_binarize(&ctx, &hologram)?,
        Command::Export => commands::run_export(&ctx)?,
        Command::Gradcheck => unreachable!("handled above"),
    };
    println!("{}", dir.display());
    Ok(())
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
