//! `hmmen` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or contract error,
//! 3 numeric failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use hmmen::network::ModelVariant;
use hmmen::verify::Fault;

use config::RunConfig;

#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug)]
pub struct NumericFailure(pub String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

#[derive(Parser)]
#[command(name = "hmmen", version, about = "RGB + infrared transmission-line segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file of flat dotted keys, e.g. `train.epochs = 40`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config file and the HMMEN_SEED environment variable.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired RGB/IR dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_images: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        /// Replace the contents of a non-empty target directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write checkpoints and history.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<ModelVariant>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Resize loaded images to this square side.
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        no_augment: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        threshold: Option<f64>,
        /// Defaults to the config.toml beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Segment one RGB/IR pair.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the normalised penultimate-layer activation map.
        #[arg(long)]
        dump_heatmap: bool,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare two evaluation reports with a paired one-sided t-test on IoU.
    Stats {
        report_a: PathBuf,
        report_b: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fast invariant suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    CorruptDeformWeights,
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.resolve_seed(common.seed)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            num_images,
            image_size,
            force,
            common,
        } => {
            let mut cfg = load(&common)?;
            if let Some(n) = num_images {
                cfg.synth.num_images = n;
            }
            if let Some(s) = image_size {
                cfg.synth.image_size = s;
            }
            commands::synth(&out, &cfg, force)
        }
        Command::Train {
            data,
            out,
            variant,
            epochs,
            batch_size,
            lr,
            image_size,
            no_augment,
            common,
        } => {
            let mut cfg = load(&common)?;
            let t = &mut cfg.train;
            if let Some(v) = variant {
                t.variant = v;
            }
            if let Some(e) = epochs {
                t.epochs = e;
            }
            if let Some(b) = batch_size {
                t.batch_size = b;
            }
            if let Some(l) = lr {
                t.base_lr = l;
            }
            if no_augment {
                t.augment = false;
            }
            if image_size.is_some() {
                cfg.data.image_size = image_size;
            }
            commands::train_cmd(&data, &out, &cfg)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            split,
            threshold,
            config,
        } => {
            let mut cfg = commands::config_for_checkpoint(config.as_deref(), &checkpoint)?;
            if let Some(t) = threshold {
                cfg.eval.threshold = t;
            }
            commands::eval_cmd(&checkpoint, &data, &split, &out, &cfg)
        }
        Command::Predict {
            checkpoint,
            rgb,
            ir,
            out,
            dump_heatmap,
            threshold,
            config,
        } => {
            let mut cfg = commands::config_for_checkpoint(config.as_deref(), &checkpoint)?;
            if let Some(t) = threshold {
                cfg.eval.threshold = t;
            }
            commands::predict_cmd(&checkpoint, &rgb, &ir, &out, dump_heatmap, &cfg)
        }
        Command::Stats {
            report_a,
            report_b,
            alpha,
            out,
        } => commands::stats_cmd(&report_a, &report_b, alpha, out.as_deref()),
        Command::Verify { seed, inject_fault } => commands::verify_cmd(
            seed,
            inject_fault.map(|f| match f {
                FaultArg::CorruptDeformWeights => Fault::CorruptDeformWeights,
            }),
        ),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if err.downcast_ref::<NumericFailure>().is_some() {
        return 3;
    }
    match err.downcast_ref::<hmmen::Error>() {
        Some(e) if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
