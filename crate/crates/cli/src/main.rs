//! Pipeline driver: phantom generation, SH fitting, training, tracking, and
//! evaluation, with a shared JSON configuration and seeded determinism.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

/// Errors with process exit semantics: usage/input problems exit 2,
/// internal invariant violations exit 3.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Internal(String),
}

impl From<ddtrack_core::io::IoError> for CliError {
    fn from(e: ddtrack_core::io::IoError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        CliError::Internal(msg.into())
    }

    pub fn usage_from(e: impl fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    pub fn internal_from(e: impl fmt::Display) -> Self {
        CliError::Internal(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Internal(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(name = "ddtrack", version, about = "Diffusion-model streamline tractography pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom: DWI, masks, ROIs, and ground truth.
    Phantom {
        /// JSON run configuration (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Master seed (overrides config and DDTRACK_SEED).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit per-voxel SH coefficients from a DWI volume.
    FitSh {
        /// Input DWI volume stem (reads <stem>.json and <stem>.raw).
        #[arg(long)]
        dwi: PathBuf,
        /// Output SH volume stem.
        #[arg(long)]
        out: PathBuf,
        /// Even SH order (default 6 -> 28 coefficients).
        #[arg(long)]
        lmax: Option<usize>,
        /// Laplace-Beltrami damping weight (default 0).
        #[arg(long)]
        reg: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the orientation model on an SH volume and reference tractogram.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding sh.{json,raw} and gt.tck.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the epoch budget from the config.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Track whole-volume streamlines with a trained checkpoint.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        /// SH volume stem.
        #[arg(long)]
        sh: PathBuf,
        /// White-matter mask volume stem.
        #[arg(long)]
        mask: PathBuf,
        /// Output .tck path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Seeds per mask voxel (default 5).
        #[arg(long)]
        seeds_per_voxel: Option<usize>,
        /// Step size in voxels (default 1.0).
        #[arg(long)]
        step: Option<f64>,
        /// Curvature threshold in degrees (default 45).
        #[arg(long)]
        angle: Option<f64>,
        /// Reverse-diffusion steps per orientation (default 4).
        #[arg(long)]
        steps: Option<usize>,
        /// Deterministic sampling (default true).
        #[arg(long)]
        deterministic: Option<bool>,
        /// Tracking worker threads; output is independent of this.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Score a tractogram against a phantom's ground truth.
    Eval {
        /// Tracked .tck file.
        #[arg(long)]
        tractogram: PathBuf,
        /// Phantom directory (masks, ROIs, gt.tck, bundles.json).
        #[arg(long)]
        phantom: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Phantom { config, out, seed } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let seed = cfg.effective_seed(seed);
            commands::cmd_phantom(&cfg, &out, seed)
        }
        Command::FitSh { dwi, out, lmax, reg, config, seed } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let seed = cfg.effective_seed(seed);
            commands::cmd_fit_sh(&cfg, &dwi, &out, lmax, reg, seed)
        }
        Command::Train { config, data, out, resume, seed, epochs } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let seed = cfg.effective_seed(seed);
            commands::cmd_train(&cfg, &data, &out, resume.as_deref(), seed)
        }
        Command::Track {
            checkpoint,
            sh,
            mask,
            out,
            config,
            seed,
            seeds_per_voxel,
            step,
            angle,
            steps,
            deterministic,
            workers,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(v) = seeds_per_voxel {
                cfg.track.seeds_per_voxel = v;
            }
            if let Some(v) = step {
                cfg.track.step = v;
            }
            if let Some(v) = angle {
                cfg.track.angle = v;
            }
            if let Some(v) = steps {
                cfg.track.num_steps = v;
            }
            if let Some(v) = deterministic {
                cfg.track.deterministic = v;
            }
            if let Some(v) = workers {
                cfg.track.workers = v;
            }
            let seed = cfg.effective_seed(seed);
            commands::cmd_track(&cfg, &checkpoint, &sh, &mask, &out, seed)
        }
        Command::Eval { tractogram, phantom, out, config, seed } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let seed = cfg.effective_seed(seed);
            commands::cmd_eval(&cfg, &tractogram, &phantom, &out, seed)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
