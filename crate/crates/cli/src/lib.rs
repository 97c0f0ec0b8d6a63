//! Command-line driver: run configuration, checkpoints, synthetic corpora,
//! attention exports and the subcommands that tie them together.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod export;
pub mod synth;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use notecoder_core::cohort::Split;
use notecoder_core::Error;

use crate::commands::ExportRequest;
use crate::config::RunConfig;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "notecoder", version, about = "Multi-label coding of clinical notes")]
pub struct Cli {
    /// Run configuration (flat JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; all cores when unset.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Print the configuration with every default filled in, then exit.
    #[arg(long, global = true)]
    pub print_effective_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the vocabulary and report OOV rates.
    BuildVocab,
    /// Masked-LM and next-sentence pretraining of the encoder.
    Pretrain,
    /// Train the configured classification head.
    Train,
    /// Evaluate a classifier checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Score notes from a JSON-lines file.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Export label and head attention for one note as JSON and HTML.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        note_id: Option<String>,
        #[arg(long)]
        text: Option<String>,
        /// Label codes to explain.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        #[arg(long, default_value_t = 0)]
        chunk: usize,
        /// Token positions to mask and fill in (encoder checkpoints).
        #[arg(long, value_delimiter = ',')]
        infill: Vec<usize>,
    },
    /// Generate the synthetic corpora into the output directory.
    Synth,
    /// Assign patients to train/dev/test.
    Split,
}

/// Exit status for an error: configuration problems are usage errors,
/// non-finite values are numeric failures, everything else is a data error.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidConfig(_) => EXIT_USAGE,
                Error::NonFinite(_) | Error::NonFiniteGradient => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn effective_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn execute(cli: &Cli) -> anyhow::Result<()> {
    let cfg = effective_config(cli)?;
    if cli.print_effective_config {
        println!("{}", cfg.to_pretty_json());
        return Ok(());
    }
    cfg.validate()?;
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        // A second call in the same process keeps the existing pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match &cli.command {
        Command::BuildVocab => print(&commands::build_vocab(&cfg)?.1)?,
        Command::Pretrain => {
            let out = commands::cmd_pretrain(&cfg)?;
            log::info!("best dev loss at step {}", out.best_step);
        }
        Command::Train => print(&commands::cmd_train(&cfg)?.metrics)?,
        Command::Evaluate { checkpoint, split } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| commands::model_dir(&cfg));
            let eval = commands::cmd_evaluate(&cfg, &ckpt, split.unwrap_or(cfg.eval_split))?;
            println!(
                "{} micro-AUC {:.4} macro-AUC {:.4}",
                eval.split.as_str(),
                eval.report.micro_auc,
                eval.report.macro_auc
            );
        }
        Command::Predict {
            checkpoint,
            input,
            output,
            top_k,
        } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| commands::model_dir(&cfg));
            let preds = commands::cmd_predict(&cfg, &ckpt, input, output, *top_k)?;
            log::info!("scored {} notes", preds.len());
        }
        Command::ExportAttention {
            checkpoint,
            note_id,
            text,
            labels,
            chunk,
            infill,
        } => {
            let req = ExportRequest {
                note_id: note_id.clone(),
                text: text.clone(),
                labels: labels.clone(),
                chunk: *chunk,
                infill: infill.clone(),
            };
            let export = commands::cmd_export_attention(&cfg, checkpoint, &req)?;
            log::info!("exported {} tokens, {} heads", export.tokens.len(), export.heads.len());
        }
        Command::Synth => {
            let world = commands::cmd_synth(&cfg)?;
            println!("wrote {} labels to {}", world.codes.len(), cfg.output_dir.display());
        }
        Command::Split => {
            let s = commands::cmd_split(&cfg)?;
            println!(
                "train {} dev {} test {}",
                s.count(Split::Train),
                s.count(Split::Dev),
                s.count(Split::Test)
            );
        }
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
