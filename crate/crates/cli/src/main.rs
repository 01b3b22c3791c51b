//! `pdistill`: synthetic data, multi-level distillation training, encoding,
//! search, evaluation and latency measurement as separate reproducible stages.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use passage_distill::index::Similarity;
use passage_distill::Mode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] passage_distill::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(e) if e.is_data_error() => 2,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pdistill", version, about = "Dense retrieval trained by multi-level distillation from a cross-encoder")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus, queries, qrels and train/held-out splits.
    GenData(GenDataArgs),
    /// Train the retriever and ranker in one ablation mode.
    Train(TrainArgs),
    /// Embed the corpus with a trained retriever into an index file.
    Encode(EncodeArgs),
    /// Retrieve the top-k documents for every query into a run file.
    Search(SearchArgs),
    /// Score a run file against qrels.
    Eval(EvalArgs),
    /// Time query encoding plus exact top-k search.
    Latency(LatencyArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory [default: data]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corpus size [default: 2000]
    #[arg(long)]
    pub num_docs: Option<usize>,
    /// Training queries [default: 200]
    #[arg(long)]
    pub train_queries: Option<usize>,
    /// Held-out queries [default: 50]
    #[arg(long)]
    pub heldout_queries: Option<usize>,
    /// Vocabulary size [default: 400]
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Tokens per document [default: 8]
    #[arg(long)]
    pub doc_len: Option<usize>,
    /// Tokens per query [default: 4]
    #[arg(long)]
    pub query_len: Option<usize>,
    /// Master seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace existing files
    #[arg(long, default_value_t = false)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Data directory from gen-data [default: data]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints, vocabulary and history [default: model]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ablation mode: basic, sd, wd, fnf, sd+wd, full [default: full]
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Passes over the training groups [default: 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Query groups per step [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Candidates per group, one positive included [default: 8]
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Retriever learning rate [default: 0.001]
    #[arg(long)]
    pub lr_retriever: Option<f64>,
    /// Ranker learning rate [default: 0.001]
    #[arg(long)]
    pub lr_ranker: Option<f64>,
    /// Save intermediate checkpoints every N epochs [default: off]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Master seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Directory holding model.retriever and vocab.txt [default: model]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Data directory holding corpus.tsv [default: data]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Index file to write [default: <model>/index.pdix]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// dot or cosine [default: dot]
    #[arg(long)]
    pub similarity: Option<Similarity>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Index file [default: <model>/index.pdix]
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Directory holding model.retriever and vocab.txt [default: model]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Query TSV [default: <data>/queries.tsv]
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Restrict to the query ids listed in this file, one per line [default: all]
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Data directory [default: data]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Results per query [default: 100]
    #[arg(long)]
    pub k: Option<usize>,
    /// Run file to write [default: <model>/run.tsv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run file [default: <model>/run.tsv]
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Qrels TSV [default: <data>/qrels.tsv]
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// Data directory [default: data]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory holding the default run file [default: model]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated metrics [default: MRR@10,R@10,R@100]
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
    /// Also write one JSON record per metric here
    #[arg(long)]
    pub records: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LatencyArgs {
    /// Index file [default: <model>/index.pdix]
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Directory holding model.retriever and vocab.txt [default: model]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Query TSV to sample from [default: <data>/queries.tsv]
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Data directory [default: data]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Randomly selected queries to time [default: 100]
    #[arg(long)]
    pub num_queries: Option<usize>,
    /// Timed repetitions per query [default: 5]
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Results per query [default: 100]
    #[arg(long)]
    pub k: Option<usize>,
    /// Master seed for query selection [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the stats record here as JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
