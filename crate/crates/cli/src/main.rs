//! `memeclf` — the operator surface for the meme-classification
//! pipeline. Logs go to stderr, machine-readable results to files under
//! the output directory, and stdout carries a one-line summary. Exit
//! codes: 0 success, 1 validation error, 2 runtime failure.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use memeclf::data::SyntheticMode;
use memeclf::model::Profile;
use run::CliError;

#[derive(Parser)]
#[command(
    name = "memeclf",
    about = "Vision-and-language meme classification pipeline",
    version
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key-value config file (dotted sections: model.*, train.*,
    /// data.*, eval.*); flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (also MEMECLF_OUT_DIR).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Manifest path (JSONL).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    /// Architecture profile: desk | paper.
    #[arg(long, global = true)]
    profile: Option<Profile>,

    /// Base seed (train.seed and eval.base_seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// OCR adapter: none | sidecar | command:<program>.
    #[arg(long, global = true)]
    ocr: Option<String>,

    /// Training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Class counts, fractions, and the text-length histogram.
    Stats,
    /// Resolve annotator votes into labels at the agreement threshold.
    Consensus {
        /// Minimum agreement fraction for a label.
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
    },
    /// Generate a synthetic corpus (images, OCR sidecars, manifest).
    Synth {
        #[arg(long)]
        n: usize,
        /// xor (label needs both modalities) | easy (image marker only).
        #[arg(long, default_value = "xor")]
        mode: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train with the split protocol; --runs repeats with consecutive
    /// seeds and reports the per-metric median.
    Train {
        #[arg(long)]
        runs: Option<usize>,
        /// on | off | both (side-by-side comparison, identical seeds).
        #[arg(long, default_value = "off")]
        augmentation: String,
    },
    /// Score a checkpoint on a labeled manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// K-fold cross-validation against a fixed holdout split.
    Kfold {
        #[arg(long)]
        k: Option<usize>,
        /// Emit the fold plan without training.
        #[arg(long, default_value_t = false)]
        plan_only: bool,
    },
    /// Per-record probabilities for a manifest (labels not required).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full-model gradient check (desk config, double precision).
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::defaults();
    if let Some(path) = &cli.common.config {
        cfg.apply_file(path).map_err(CliError::Validation)?;
    }
    if let Some(profile) = cli.common.profile {
        cfg.set_profile(profile);
    }
    if let Some(out) = &cli.common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(manifest) = &cli.common.manifest {
        cfg.data.manifest = Some(manifest.clone());
    }
    if let Some(seed) = cli.common.seed {
        cfg.train.seed = seed;
        cfg.eval.base_seed = seed;
    }
    if let Some(ocr) = &cli.common.ocr {
        cfg.apply_kv("data.ocr", ocr).map_err(CliError::Validation)?;
    }
    if let Some(epochs) = cli.common.epochs {
        cfg.train.epochs = epochs;
    }
    match &cli.command {
        Command::Train { runs, .. } => {
            if let Some(runs) = runs {
                cfg.eval.runs = *runs;
            }
        }
        Command::Kfold { k, .. } => {
            if let Some(k) = k {
                cfg.eval.k = *k;
            }
        }
        Command::Synth { seed, .. } => {
            cfg.train.seed = *seed;
        }
        _ => {}
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> run::CliResult {
    match &cli.command {
        Command::Stats => run::stats(cfg),
        Command::Consensus { threshold } => run::consensus(cfg, *threshold),
        Command::Synth { n, mode, seed } => {
            let mode: SyntheticMode = mode.parse().map_err(CliError::Validation)?;
            run::synth(cfg, *n, mode, *seed)
        }
        Command::Train { augmentation, .. } => run::train(cfg, augmentation),
        Command::Eval { checkpoint } => run::eval(cfg, checkpoint),
        Command::Kfold { plan_only, .. } => run::kfold(cfg, *plan_only),
        Command::Predict { checkpoint } => run::predict(cfg, checkpoint),
        Command::Gradcheck { step, tol } => run::gradcheck(cfg, *step, *tol),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage problems are validation errors
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };

    let cfg = match resolve_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };

    match dispatch(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
