//! `fuselab`: generate data, train, attack, evaluate, sweep and transfer.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
//! 4 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fuselab_core::{AtVariant, FusionMode};

use config::AttackKind;

/// A configuration or usage problem detected by the runner itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "fuselab", version, about = "Adversarial robustness lab for camera+LiDAR fusion detectors")]
struct Cli {
    /// Worker threads for per-scene parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train and val splits.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scenes per split, overriding the config.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a detector, clean or adversarially.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_fusion)]
        fusion: Option<FusionMode>,
        #[arg(long, value_parser = parse_variant)]
        at_variant: Option<AtVariant>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Start from these parameters instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Attack every val scene and store the perturbations.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        attack: Option<AttackKind>,
    },
    /// mAP on the val split, clean or under an attack.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// White-box attack applied before inference.
        #[arg(long, value_enum, conflicts_with = "perturbations")]
        attack: Option<AttackKind>,
        /// Directory of stored `pert_<i>.bin` files.
        #[arg(long)]
        perturbations: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// mAP versus budget under a white-box attack.
    Curve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        attack: Option<AttackKind>,
    },
    /// Target mAP under perturbations crafted on a source model.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        attack: Option<AttackKind>,
    },
}

fn parse_fusion(s: &str) -> Result<FusionMode, String> {
    s.parse().map_err(|e: fuselab_core::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<AtVariant, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!("unknown variant {s:?}; expected one of none, at-image, at-car, at-lidar, at-lidar-car, at-joint, at-joint-car")
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| UsageError(format!("--jobs: {e}")))?;
    }
    match cli.command {
        Command::GenData { config, out, count } => commands::gen_data(&config, &out, count),
        Command::Train {
            config,
            data,
            out,
            fusion,
            at_variant,
            epochs,
            init,
        } => commands::train(&config, &data, &out, fusion, at_variant, epochs, init.as_deref()),
        Command::Attack {
            config,
            checkpoint,
            data,
            out,
            attack,
        } => commands::attack(&config, &checkpoint, &data, &out, attack),
        Command::Eval {
            config,
            checkpoint,
            data,
            attack,
            perturbations,
            out,
        } => commands::eval(&config, &checkpoint, &data, attack, perturbations.as_deref(), out.as_deref()),
        Command::Curve {
            config,
            checkpoint,
            data,
            out,
            attack,
        } => commands::curve(&config, &checkpoint, &data, &out, attack),
        Command::Transfer {
            config,
            source,
            target,
            data,
            out,
            attack,
        } => commands::transfer(&config, &source, &target, &data, &out, attack),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use fuselab_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } | E::Json { .. } => 3,
                E::NonFinite(_) | E::Diverged { .. } => 4,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
