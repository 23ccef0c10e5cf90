//! `ore` command-line entry point.
//!
//! Every failure prints one line `CODE: message` on stderr and exits with the
//! code's status (see [`CliError::exit_code`]).

mod commands;
mod error;
mod inputs;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ore", version, about = "Budgeted re-ranking with online relevance estimation")]
#[command(after_help = "Exit codes: 0 ok, 2 usage or validation, 3 io, 4 parse, 5 lookup, 6 budget, 7 refused.")]
pub struct Cli {
    /// Worker threads for per-query parallelism (default: available cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// INI file with defaults; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a BM25 inverted index from a JSONL corpus.
    BuildIndex(BuildIndexArgs),
    /// Build a kNN affinity graph from an index or an embedding table.
    BuildGraph(BuildGraphArgs),
    /// Generate a synthetic collection with planted relevant clusters.
    Synth(SynthArgs),
    /// Run one system and write the run file, diagnostics and metrics.
    Run(RunArgs),
    /// Evaluate a TREC run file against qrels.
    Eval(EvalArgs),
    /// Recall and cost over a grid of systems, call budgets and seeds.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k1: Option<f64>,
    /// BM25 length normalisation.
    #[arg(long = "bm25-b")]
    pub bm25_b: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GraphFrom {
    /// BM25 with each document as a query.
    Lexical,
    /// Embedding similarity.
    Semantic,
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    #[arg(long, value_enum)]
    pub from: GraphFrom,
    /// Index file (lexical graphs).
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Corpus to index on the fly when no index is given (lexical graphs).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Document vectors (semantic graphs).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// `dot` or `cosine`.
    #[arg(long, default_value = "dot")]
    pub metric: String,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_docs: Option<usize>,
    #[arg(long)]
    pub n_queries: Option<usize>,
    #[arg(long)]
    pub clusters_per_query: Option<usize>,
    #[arg(long)]
    pub cluster_size: Option<usize>,
    #[arg(long)]
    pub visible_fraction: Option<f64>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub graph_k: Option<usize>,
    /// Also write `index.bin` next to the corpus.
    #[arg(long)]
    pub index: bool,
}

/// Where the collection comes from. `--data` supplies every file by its
/// standard name; explicit paths override individual files.
#[derive(Debug, Args, Clone, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// Document vectors.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub query_embeddings: Option<PathBuf>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// `dot` or `cosine`.
    #[arg(long)]
    pub metric: Option<String>,
    /// Cheap scorer added to ranker scores: `main`, `none`, or a document
    /// vector file (with `--psi-queries`).
    #[arg(long)]
    pub psi: Option<String>,
    #[arg(long)]
    pub psi_queries: Option<PathBuf>,
}

/// Budget, ranker and scheduler settings shared by `run` and `sweep`.
#[derive(Debug, Args, Clone, Default)]
pub struct TuneArgs {
    #[arg(long)]
    pub c: Option<usize>,
    #[arg(long)]
    pub b: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `graded:σ`, `latent[:σ]` or `cached:path`.
    #[arg(long)]
    pub ranker: Option<String>,
    #[arg(long)]
    pub per_call_ms: Option<f64>,
    #[arg(long)]
    pub min_grade: Option<u8>,
    /// Size of the top scored set S.
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub random_alpha_first_batch: bool,
    /// Let `exhaustive` score pools beyond the safety cap.
    #[arg(long)]
    pub allow_large: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub tune: TuneArgs,
    #[arg(long)]
    pub system: Option<String>,
    /// Ranker calls (batches); defaults to ceil(c / b).
    #[arg(long)]
    pub cb: Option<usize>,
    /// Output directory for run.trec, diagnostics.tsv and metrics.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Extra cutoffs for the metrics file, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long)]
    pub tag: Option<String>,
    /// Also write final feature vectors to features.tsv.
    #[arg(long)]
    pub dump_features: bool,
    /// Also write per-batch weight vectors to alpha.tsv.
    #[arg(long)]
    pub dump_alpha: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    /// Cutoffs, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![10, 100])]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub min_grade: u8,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub tune: TuneArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec!["ore-adaptive".to_string(), "gar".to_string(), "quam".to_string()])]
    pub systems: Vec<String>,
    /// Call budgets; defaults to 1..=ceil(c / b).
    #[arg(long, value_delimiter = ',')]
    pub cbs: Vec<usize>,
    /// Seeds; defaults to the single `--seed`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("E_USAGE: {first}");
            return ExitCode::from(2);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.code(), e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
