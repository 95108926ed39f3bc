//! `lexnmt`: preprocessing, BPE, training, translation, scoring and model
//! inspection from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lexnmt::model::Variant;

use config::Precision;

/// A problem with the command line or configuration; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser, Debug)]
#[command(name = "lexnmt", version, about = "Attentional NMT with fixed-norm output layers and a lexical module")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter a parallel corpus by length and build vocabularies.
    Prep(PrepArgs),
    /// Learn BPE merges from tokenized text.
    BpeLearn(BpeLearnArgs),
    /// Segment (or restore) text with a learned BPE model.
    BpeApply(BpeApplyArgs),
    /// Train a model; keeps the checkpoint with the best dev BLEU.
    Train(TrainArgs),
    /// Translate tokenized text with beam search.
    Translate(TranslateArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate(EvaluateArgs),
    /// Paired bootstrap resampling test between two systems.
    Significance(SignificanceArgs),
    /// Lexical-module translation table for every source word.
    Lexicon(LexiconArgs),
    /// Decompose output logits at one decoding step.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct PrepArgs {
    /// Tokenized source file, one sentence per line.
    #[arg(long)]
    pub src: PathBuf,
    /// Tokenized target file, line-aligned with --src.
    #[arg(long)]
    pub tgt: PathBuf,
    /// Output directory for vocabularies and filtered text.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Keep word types seen at least this often.
    #[arg(long, default_value_t = 5)]
    pub min_count: u64,
    /// Drop pairs with either side longer than this.
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
}

#[derive(Args, Debug)]
pub struct BpeLearnArgs {
    /// Tokenized training text (repeat for joint learning over several files).
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    /// Number of merge operations.
    #[arg(long)]
    pub merges: usize,
    /// Merge file to write, one `left right` pair per line.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct BpeApplyArgs {
    /// Merge file from bpe-learn.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Target side of a parallel corpus, segmented alongside --input.
    #[arg(long, requires = "tgt_output")]
    pub tgt_input: Option<PathBuf>,
    #[arg(long, requires = "tgt_input")]
    pub tgt_output: Option<PathBuf>,
    /// Merge file for the target side (default: --model).
    #[arg(long)]
    pub tgt_model: Option<PathBuf>,
    /// Append a copy of the corpus with per-side singleton types replaced by
    /// UNK. Halve the epoch count when training on the result.
    #[arg(long, requires = "tgt_input")]
    pub augment_singleton_unk: bool,
    /// Join `@@` pieces back into words instead of segmenting.
    #[arg(long, conflicts_with_all = ["augment_singleton_unk"])]
    pub undo: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML run configuration with [data], [model] and [train] sections.
    #[arg(long, env = "LEXNMT_CONFIG")]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint; its model, optimizer and vocabularies are reused.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub train_src: Option<PathBuf>,
    #[arg(long)]
    pub train_tgt: Option<PathBuf>,
    #[arg(long)]
    pub dev_src: Option<PathBuf>,
    #[arg(long)]
    pub dev_tgt: Option<PathBuf>,
    /// Directory for checkpoints and the training log [default: run].
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Output layer [default: fixnorm_lex].
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Fixed norm r [default: 5 for fixnorm, 3.5 for fixnorm_lex].
    #[arg(long)]
    pub r: Option<f64>,
    /// Hidden and embedding size [default: 512].
    #[arg(long)]
    pub hidden_size: Option<usize>,
    /// LSTM layers in encoder and decoder [default: 1].
    #[arg(long)]
    pub layers: Option<usize>,
    /// Dropout on non-recurrent connections [default: 0.2].
    #[arg(long)]
    pub dropout: Option<f64>,
    /// [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Vocabulary frequency threshold [default: 5].
    #[arg(long)]
    pub min_count: Option<u64>,
    /// Training length limit [default: 50].
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Seed for initialization, shuffling and dropout [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Floating-point precision [default: f32].
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Beam size for dev decoding [default: 12].
    #[arg(long)]
    pub dev_beam: Option<usize>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Tokenized source text, one sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file (default: stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    pub beam: usize,
    /// Length-penalty exponent.
    #[arg(long, default_value_t = 0.8)]
    pub alpha: f64,
    /// Maximum output length [default: 2 × source length + 10].
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Replace each UNK with the most attended source word (on by default).
    #[arg(long, overrides_with = "no_replace_unk")]
    pub replace_unk: bool,
    #[arg(long, overrides_with = "replace_unk")]
    pub no_replace_unk: bool,
    /// Write one `SENT i T S` block of attention weights per sentence here.
    #[arg(long)]
    pub dump_attention: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Highest n-gram order.
    #[arg(long, default_value_t = 4)]
    pub max_n: usize,
}

#[derive(Args, Debug)]
pub struct SignificanceArgs {
    /// Output of the system tested for being better.
    #[arg(long)]
    pub hyp_a: PathBuf,
    /// Output of the system it is compared against. The p-value is the
    /// fraction of resamples where this system scores at least as well.
    #[arg(long)]
    pub hyp_b: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct LexiconArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Output file (default: stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Tokenized source sentence.
    #[arg(long)]
    pub source: String,
    /// Tokenized target sentence; the first --position words are forced.
    #[arg(long, default_value = "")]
    pub target: String,
    /// Target position to inspect [default: end of --target].
    #[arg(long)]
    pub position: Option<usize>,
    /// Target words to decompose [default: the --top words by logit plus the reference word].
    #[arg(long)]
    pub candidates: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prep(a) => commands::prep(&a),
        Command::BpeLearn(a) => commands::bpe_learn(&a),
        Command::BpeApply(a) => commands::bpe_apply(&a),
        Command::Train(a) => commands::train(&a),
        Command::Translate(a) => commands::translate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Significance(a) => commands::significance(&a),
        Command::Lexicon(a) => commands::lexicon(&a),
        Command::Inspect(a) => commands::inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
