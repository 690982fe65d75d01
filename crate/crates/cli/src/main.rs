//! `dac-vlm`: data generation, staged training, evaluation and analysis.
//!
//! Every command writes under `--out` with a fixed layout (`checkpoints/`,
//! `metrics/`, `reports/`) plus one `manifest.json`.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 numeric or training
//! failure, 4 I/O or checkpoint error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dac_vlm::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "dac-vlm", version, about = "Desk-scale decoder-only vision-language model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus (JSONL plus PPM images).
    Datagen(DatagenArgs),
    /// Pretrain the dense text-only base LM on a corpus's language.
    Pretrain(PretrainArgs),
    /// Run one training stage or the whole 1 → 3 schedule.
    Train(TrainArgs),
    /// Exact-match and perplexity evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Per-group weight drift between two checkpoints.
    Drift(DriftArgs),
    /// Train several variants identically and tabulate the results.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Canvas side in pixels (a multiple of 32).
    #[arg(long, default_value_t = 128)]
    pub canvas: usize,
    #[arg(long, default_value_t = 1)]
    pub min_objects: usize,
    #[arg(long, default_value_t = dac_vlm::synth::MAX_OBJECTS)]
    pub max_objects: usize,
    /// Kind weights, e.g. `caption=0.3,qa=0.3,instruction=0.2,text_only=0.2`.
    #[arg(long)]
    pub kinds: Option<String>,
    /// Inline images as hex in the JSONL instead of writing `images/`.
    #[arg(long)]
    pub inline_images: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Corpus directory (or its `corpus.jsonl`).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 128)]
    pub d: usize,
    #[arg(long, default_value_t = 512)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub d1: usize,
    #[arg(long, default_value_t = 256)]
    pub context: usize,
    /// Held-out language-only sentences for the perplexity probe.
    #[arg(long, default_value_t = 64)]
    pub held_out: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON file `{"variant": ..., "stages": [StageConfig, ...]}`; stages
    /// absent from the file use the desk defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `1`, `2.1`, `2.2`, `3` or `all`.
    #[arg(long)]
    pub stage: String,
    /// Dense base LM, or a checkpoint of an earlier stage of the same variant.
    #[arg(long)]
    pub base_ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the variant named in the config.
    #[arg(long)]
    pub variant: Option<String>,
    /// Overrides every selected stage's step count.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 64)]
    pub held_out: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated sample kinds to score.
    #[arg(long, default_value = "caption,qa,instruction,text_only")]
    pub kinds: String,
    #[arg(long, default_value_t = 128)]
    pub canvas: usize,
    /// Evaluate only the first N corpus rows.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DriftArgs {
    #[arg(long)]
    pub before: PathBuf,
    #[arg(long)]
    pub after: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `layer_type`, `layer_index` or `both`.
    #[arg(long, default_value = "both")]
    pub grouping: String,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Comma-separated variants, e.g. `dense,moe_ffn,dac`.
    #[arg(long)]
    pub variants: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub base_ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Evaluation corpus; defaults to the training corpus.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long, default_value = "qa")]
    pub eval_kinds: String,
    #[arg(long, default_value_t = 128)]
    pub canvas: usize,
    #[arg(long, default_value_t = 100)]
    pub eval_limit: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub held_out: usize,
}

/// Exit code for an error chain: library errors by kind, bare I/O as 4.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Usage(_) | Error::Config(_) | Error::Comparison(_) | Error::Json(_) => EXIT_USAGE,
                Error::Io { .. } | Error::Checkpoint(_) => EXIT_IO,
                Error::Numeric(_)
                | Error::Training { .. }
                | Error::DegenerateBatch
                | Error::Dimension(_)
                | Error::Length { .. }
                | Error::Vocab { .. }
                | Error::Scene(_)
                | Error::Generation(_) => EXIT_NUMERIC,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_USAGE;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = commands::thread_cap().and_then(|threads| match cli.command {
        Command::Datagen(a) => commands::datagen(&a, threads),
        Command::Pretrain(a) => commands::pretrain(&a, threads),
        Command::Train(a) => commands::train(&a, threads),
        Command::Eval(a) => commands::eval(&a, threads),
        Command::Drift(a) => commands::drift(&a, threads),
        Command::Compare(a) => commands::compare(&a, threads),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_map_to_documented_codes() {
        let code = |e: Error| exit_code(&anyhow::Error::new(e));
        assert_eq!(code(Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(code(Error::Training { step: 3, reason: "nan".into() }), EXIT_NUMERIC);
        assert_eq!(code(Error::Checkpoint("x".into())), EXIT_IO);
        let io = anyhow::Error::new(std::io::Error::other("disk")).context("writing");
        assert_eq!(exit_code(&io), EXIT_IO);
        let wrapped = anyhow::Error::new(Error::Numeric("inf".into())).context("stage 2.1");
        assert_eq!(exit_code(&wrapped), EXIT_NUMERIC);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
