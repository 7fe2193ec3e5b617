//! `thama`: synthesis, pooling, training, evaluation and verification runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thama_core::{ErrorCategory, ModelKind};

use crate::config::CoreChoice;

#[derive(Parser)]
#[command(
    name = "thama",
    version,
    about = "Tucker-Hadamard fusion classifiers over pooled embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic two-domain task as EMB1 files plus manifest.json.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// JSON with synthetic-task fields; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mean-pool frame-level features into an EMB1 file.
    Pool {
        #[arg(
            long,
            conflicts_with = "manifest",
            required_unless_present = "manifest"
        )]
        frames: Option<PathBuf>,
        /// CSV manifest with header `id,label,domain,path`.
        #[arg(long, requires = "dim")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train on the configured data; writes config, checkpoint, history and report.
    Train(RunArgs),
    /// Score an EMB1 test split with a checkpoint and print the report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        view1: PathBuf,
        #[arg(long)]
        view2: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Overrides the training-domain tag stored in the checkpoint.
        #[arg(long)]
        train_domain: Option<String>,
    },
    /// Train on one domain and evaluate on both test splits.
    Xdomain(RunArgs),
    /// Print the trainable-parameter count.
    Params {
        #[arg(long, conflicts_with_all = ["kind", "d1", "d2", "d_f", "core", "ranks"])]
        config: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Compare analytic and central-difference gradients in 64-bit mode.
    Gradcheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = thama_core::gradcheck::DEFAULT_EPSILON)]
        epsilon: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides both the model and the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
pub struct ModelArgs {
    #[arg(long, value_parser = parse_kind)]
    pub kind: Option<ModelKind>,
    #[arg(long)]
    pub d1: Option<usize>,
    #[arg(long)]
    pub d2: Option<usize>,
    #[arg(long = "d-f")]
    pub d_f: Option<usize>,
    #[arg(long, value_enum)]
    pub core: Option<CoreChoice>,
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub ranks: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| format!("unknown model kind `{s}` (fcn, cnn, concat, thama)"))
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { out, config, seed } => commands::synth(&out, config.as_deref(), seed),
        Command::Pool {
            frames,
            manifest,
            dim,
            output,
        } => commands::pool(frames.as_deref(), manifest.as_deref(), dim, &output),
        Command::Train(a) => commands::train(&a.config, a.seed),
        Command::Eval {
            checkpoint,
            view1,
            view2,
            output,
            train_domain,
        } => commands::eval(
            &checkpoint,
            &view1,
            view2.as_deref(),
            output.as_deref(),
            train_domain,
        ),
        Command::Xdomain(a) => commands::xdomain(&a.config, a.seed),
        Command::Params { config, model } => commands::params(config.as_deref(), &model),
        Command::Gradcheck { model, epsilon } => commands::gradcheck(&model, epsilon),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let category = e.category();
            eprintln!("error ({}): {e}", format!("{category:?}").to_lowercase());
            ExitCode::from(exit_code(category))
        }
    }
}
