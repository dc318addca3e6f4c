//! Command-line front end: corpus preprocessing, tokenizer training,
//! pretraining and evaluation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "ltgbert",
    version,
    about = "Desk-scale LTG-BERT pretraining and evaluation",
    arg_required_else_help = true
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the stages that can use them.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render XML-like sources to Markdown and split train/dev.
    Preprocess {
        /// Source files or directories (every `*.xml` inside).
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 35.0 / 4049.0)]
        dev_fraction: f64,
    },
    /// Train a WordPiece vocabulary of an exact size.
    TrainTokenizer {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: usize,
    },
    /// Share of vocabulary entries seen at least `threshold` times.
    Coverage {
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 100)]
        threshold: u64,
    },
    /// Masked-language-model pretraining.
    Pretrain {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Minimal-pair accuracy by pseudo-log-likelihood.
    ScorePairs {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Edge probing of a frozen model.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Mix the embedding output in as layer 0.
        #[arg(long)]
        include_embedding: bool,
    },
    /// Layer weights (percent) and their regression slope.
    LayerReport {
        /// `gamma.tsv` written by `probe`.
        #[arg(long)]
        gamma: PathBuf,
    },
    /// Fine-tune a sequence classifier or regressor.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "single")]
        task: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Compare MLM-loss gradients with central differences.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print a checkpoint's config, metadata and tensors.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Errors caused by the invocation rather than the computation.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for item in &common.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got {item:?}")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        config.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &common.out {
        config.set("out_dir", &out.to_string_lossy())?;
    }
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = load_config(&cli.common)?;
    eprintln!("# resolved config\n{}", config.resolved());
    let threads = cli.common.threads.max(1);
    match cli.command {
        Command::Preprocess {
            inputs,
            dev_fraction,
        } => commands::preprocess(&config, &inputs, dev_fraction),
        Command::TrainTokenizer { inputs, vocab_size } => {
            commands::train_tokenizer(&config, &inputs, vocab_size)
        }
        Command::Coverage {
            vocab,
            inputs,
            threshold,
        } => commands::coverage(&config, vocab, &inputs, threshold),
        Command::Pretrain {
            train,
            vocab,
            resume,
        } => commands::pretrain(&config, train, vocab, resume),
        Command::ScorePairs {
            checkpoint,
            vocab,
            pairs,
        } => commands::score_pairs(&config, checkpoint, vocab, &pairs, threads),
        Command::Probe {
            checkpoint,
            vocab,
            train,
            test,
            epochs,
            batch_size,
            lr,
            include_embedding,
        } => {
            let opts = commands::TrainOpts {
                epochs,
                batch_size,
                lr,
            };
            commands::probe(
                &config,
                checkpoint,
                vocab,
                &train,
                &test,
                opts,
                include_embedding,
            )
        }
        Command::LayerReport { gamma } => commands::layer_report(&config, &gamma),
        Command::Finetune {
            checkpoint,
            vocab,
            train,
            test,
            task,
            epochs,
            batch_size,
            lr,
        } => {
            let opts = commands::TrainOpts {
                epochs,
                batch_size,
                lr,
            };
            commands::finetune(&config, checkpoint, vocab, &train, &test, &task, opts)
        }
        Command::GradCheck { step, tolerance } => commands::grad_check(&config, step, tolerance),
        Command::InspectCheckpoint { checkpoint } => commands::inspect_checkpoint(&checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() || e.is::<ConfigError>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
