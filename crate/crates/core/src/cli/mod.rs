//! The `lmlab` command line. `run` parses arguments, dispatches, and maps
//! every error to a one-line `error[<category>]: <message>` on stderr plus
//! the category's exit code.

mod commands;
mod data;
mod rundir;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{ErrorCategory, LmError, Result};

#[derive(Parser, Debug)]
#[command(name = "lmlab", version, about = "Desk-scale language-model laboratory")]
pub struct Cli {
    /// Root seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a corpus or a task dataset.
    Train(TrainArgs),
    /// Sample a continuation from a trained run.
    Generate(GenerateArgs),
    /// Cross-entropy and perplexity of a corpus.
    Perplexity(PerplexityArgs),
    /// Fit an n-gram model and score held-out text.
    Ngram(NgramArgs),
    /// Co-occurrence embeddings, PCA and analogies.
    Embed(EmbedArgs),
    /// Grammar tools.
    #[command(subcommand)]
    Grammar(GrammarCommand),
    /// Emit a synthetic task dataset.
    #[command(subcommand)]
    Task(TaskCommand),
    /// Scaling grids and fits.
    #[command(subcommand)]
    Scaling(ScalingCommand),
    /// Activation capture and structural probes.
    #[command(subcommand)]
    Probe(ProbeCommand),
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    /// Output directory (must be new or empty).
    #[arg(long)]
    pub out: PathBuf,
    /// Clear an existing output directory first.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config entry (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Task directory written by `lmlab task`.
    #[arg(long)]
    pub task: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Run directory written by `lmlab train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "")]
    pub prompt: String,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
}

#[derive(Args, Debug)]
pub struct PerplexityArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Score with the uniform model over the vocabulary.
    #[arg(long, conflicts_with = "run")]
    pub uniform: bool,
    /// Vocabulary size for `--uniform` (default: distinct corpus tokens).
    #[arg(long, requires = "uniform")]
    pub vocab_size: Option<usize>,
    /// Score with a trained run.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Window stride for `--run` (default: half the window).
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, default_value = "whitespace")]
    pub tokenizer: String,
}

#[derive(Args, Debug)]
pub struct NgramArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub order: usize,
    /// Add-k smoothing constant.
    #[arg(long, default_value_t = 1.0)]
    pub k: f64,
    #[arg(long, default_value = "whitespace")]
    pub tokenizer: String,
    /// Print every count.
    #[arg(long)]
    pub dump: bool,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub window: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Use ln(1 + count) instead of raw counts.
    #[arg(long)]
    pub log: bool,
    /// "a b c": solves a : b :: c : ? (repeatable).
    #[arg(long)]
    pub analogy: Vec<String>,
    #[arg(long, default_value = "whitespace")]
    pub tokenizer: String,
    /// Write the embedding table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct GrammarSource {
    /// Built-in name (fig3, fig3-pcfg) or a grammar file.
    #[arg(long)]
    pub grammar: String,
    /// Give every rule of a nonterminal equal probability.
    #[arg(long)]
    pub uniform: bool,
}

#[derive(Subcommand, Debug)]
pub enum GrammarCommand {
    /// Sample strings, one per line.
    Gen {
        #[command(flatten)]
        source: GrammarSource,
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Print the bracketed tree after each string.
        #[arg(long)]
        trees: bool,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Most probable parse (CYK).
    Parse {
        #[command(flatten)]
        source: GrammarSource,
        #[arg(long)]
        input: String,
        /// Indented instead of bracketed output.
        #[arg(long)]
        indent: bool,
    },
    /// Log-probability of a string (inside algorithm).
    Inside {
        #[command(flatten)]
        source: GrammarSource,
        #[arg(long)]
        input: String,
    },
    /// Monte Carlo entropy per token.
    Entropy {
        #[command(flatten)]
        source: GrammarSource,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        /// Count one end-of-string token per sample.
        #[arg(long)]
        terminator: bool,
    },
}

#[derive(Subcommand, Debug)]
pub enum TaskCommand {
    /// `a + b =` -> `(a + b) mod m`.
    #[command(name = "modular_add", alias = "modular-add")]
    ModularAdd {
        #[arg(long, default_value_t = 97)]
        modulus: usize,
        #[arg(long, default_value_t = 0.5)]
        train_fraction: f64,
        /// Sample this many pairs instead of enumerating all.
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// `... A B ... A` -> `B`.
    Induction {
        #[arg(long, default_value_t = 30)]
        vocab: usize,
        #[arg(long, default_value_t = 16)]
        seq_len: usize,
        #[arg(long, default_value_t = 20000)]
        n_train: usize,
        #[arg(long, default_value_t = 1000)]
        n_test: usize,
        /// Fraction of (A, B) pairs kept out of training.
        #[arg(long, default_value_t = 0.2)]
        heldout: f64,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Subcommand, Debug)]
pub enum ScalingCommand {
    /// Train over a grid of model widths and token budgets.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Fit the scaling law to a params,tokens,loss CSV.
    Fit {
        #[arg(long)]
        points: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Write points generated from the law itself.
    Synth {
        #[arg(long, default_value_t = 8.8e13)]
        p_c: f64,
        #[arg(long, default_value_t = 5.4e13)]
        d_c: f64,
        #[arg(long, default_value_t = 0.076)]
        alpha_p: f64,
        #[arg(long, default_value_t = 0.095)]
        alpha_d: f64,
        /// Multiplicative log-normal noise level.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum ProbeCommand {
    /// Dump layer activations (and attention) for one input.
    Capture {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        input: String,
        /// Comma-separated layer indices (default: all).
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long)]
        attention: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train a structural probe on grammar samples.
    Train {
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        source: GrammarSource,
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 16)]
        rank: usize,
        #[arg(long, default_value_t = 200)]
        sentences: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        /// Train on position-shuffled trees (control task).
        #[arg(long)]
        control: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Score a trained probe on fresh grammar samples.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Directory written by `probe train`.
        #[arg(long)]
        probe: PathBuf,
        #[command(flatten)]
        source: GrammarSource,
        #[arg(long, default_value_t = 200)]
        sentences: usize,
        /// Shuffle the gold trees as the probe was trained with `--control`.
        #[arg(long)]
        control: bool,
    },
}

/// Parses `argv` (including the program name) and runs the command,
/// writing results to `out`. Returns the process exit code.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => {
                    let msg = e.to_string();
                    let first = msg.lines().next().unwrap_or("invalid arguments");
                    let first = first.trim_start_matches("error: ");
                    let _ = writeln!(err, "error[{}]: {first}", ErrorCategory::Config);
                    ErrorCategory::Config.exit_code()
                }
            };
        }
    };
    match commands::dispatch(cli, out) {
        Ok(()) => 0,
        Err(e) => report(&e, err),
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

fn report(e: &LmError, err: &mut dyn Write) -> i32 {
    let c = e.category();
    let msg = e.to_string().replace('\n', " ");
    let _ = writeln!(err, "error[{c}]: {msg}");
    c.exit_code()
}

pub(crate) fn parse_sets(sets: &[String]) -> Result<crate::config::KvConfig> {
    let mut kv = crate::config::KvConfig::new();
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| LmError::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}
