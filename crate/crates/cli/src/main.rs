use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "embedkit", version, about = "Train and evaluate small sentence-embedding encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted synthetic dataset suite.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Reduced sizes for quick runs.
        #[arg(long)]
        small: bool,
        /// Dimension of the synthetic teacher embeddings.
        #[arg(long, default_value_t = 32)]
        teacher_dim: usize,
    },
    #[command(subcommand)]
    Vocab(VocabCommand),
    /// Pre-train an encoder on a plain-text corpus.
    Pretrain {
        objective: Objective,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Distill a frozen teacher into a student over parallel pairs.
    Distill {
        #[arg(long)]
        teacher_emb: Option<PathBuf>,
        #[arg(long)]
        parallel: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Contrastive fine-tuning with dropout views.
    Simcse {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate checkpoints and write a report.
    Eval {
        regime: Regime,
        #[command(flatten)]
        run: RunArgs,
        /// Add a random-embedding baseline row.
        #[arg(long)]
        random_baseline: bool,
        #[arg(long)]
        head_kind: Option<String>,
        #[arg(long)]
        folds: Option<usize>,
        /// `classification` or `ranking`.
        #[arg(long)]
        task: Option<String>,
    },
    /// Fine-tune on growing subsets of the ranking training split.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Add a freshly initialized encoder with the first model's architecture.
        #[arg(long)]
        random_init: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Measure the damage of storing embeddings in half precision.
    Quantcheck {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Embed one text per line of a file.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "cls")]
        pooling: String,
        #[arg(long)]
        normalize: bool,
    },
    /// Remove the distillation projection from a checkpoint.
    Strip {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum VocabCommand {
    /// Learn a subword vocabulary from a text corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 2000)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        min_freq: usize,
        #[arg(long)]
        lowercase: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Union of two vocabularies, first one's order kept.
    Merge {
        first: PathBuf,
        second: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    Mlm,
    Retromae,
}

#[derive(Clone, Copy, ValueEnum)]
enum Regime {
    ZeroShot,
    Probe,
    Finetune,
}

/// Flags shared by every configurable run; each one overrides the config file.
#[derive(Args, Default)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the full-scale profile defaults.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Report path; its directory becomes the output directory.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Input checkpoint; repeat for several.
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    /// `name=path`, or a directory written by `synth`.
    #[arg(long)]
    data: Vec<String>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    pooling: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f32>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
