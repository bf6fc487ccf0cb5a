//! `cerfgan` command-line interface.
//!
//! One experiment per process; all state lives on the filesystem. Every
//! subcommand exits nonzero on error and prints a single machine-parsable
//! line `error: [CODE] message` to stderr (exit codes are documented in the
//! README).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cerfgan_core::{exec, experiment, Error};

#[derive(Parser)]
#[command(
    name = "cerfgan",
    version,
    about = "Multi-domain unsupervised image-to-image translation with a multi-class discriminator"
)]
struct Cli {
    /// Run the numeric kernels sequentially instead of on the thread pool.
    #[arg(long, global = true)]
    serial: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a config file. Trailing arguments are dotted-path
    /// overrides like `--train.total_epochs=4`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Translate image files to a target domain through a checkpoint.
    Translate {
        /// Checkpoint stem or blob path (`.bin`/`.manifest` pair).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target domain name as registered in the checkpoint manifest.
        #[arg(long)]
        target: String,
        #[arg(long)]
        out: PathBuf,
        /// Require exact multiples of the model stride instead of cropping
        /// (fully convolutional high-resolution pass).
        #[arg(long)]
        highres: bool,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Run an ablation suite: mnist-cgan-mcd, stargan-probe, or skip-depth.
    Ablate {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Parameter-count and loss-stability reports over run directories.
    Report {
        #[arg(long)]
        params: bool,
        #[arg(long)]
        stability: bool,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
    /// Generate a toy translation corpus (color-inversion or shape-fill).
    MakeToy {
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Train { config, overrides } => {
            let result = experiment::cmd_train(&config, &overrides)?;
            println!("run directory: {}", result.run_dir.display());
            println!("metric log: {}", result.metrics_path.display());
            println!(
                "steps: {}  checkpoints: {}  freeze checks: {} mcd / {} decoder, {} violations",
                result.final_step,
                result.checkpoints.len(),
                result.audit.mcd_steps_checked,
                result.audit.decoder_steps_checked,
                result.audit.violations
            );
        }
        Cmd::Translate { checkpoint, target, out, highres, inputs } => {
            let written = experiment::cmd_translate(&checkpoint, &inputs, &target, &out, highres)?;
            for path in written {
                println!("{}", path.display());
            }
        }
        Cmd::Ablate { kind, config, overrides } => {
            let dir = experiment::cmd_ablate(&kind, &config, &overrides)?;
            println!("artifacts: {}", dir.display());
        }
        Cmd::Report { params, stability, out, run_dirs } => {
            let written = experiment::cmd_report(&run_dirs, params, stability, &out)?;
            for path in written {
                println!("{}", path.display());
            }
        }
        Cmd::MakeToy { kind, n, size, seed, out } => {
            let (a, b) = experiment::cmd_make_toy(&kind, n, size, seed, &out)?;
            println!("wrote {} pairs under {} ({} and {})", n, out.display(), a, b);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.serial {
        exec::set_parallel(false);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: [{}] {}", e.code(), e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
