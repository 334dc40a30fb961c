//! `uxsid`: the pipeline from synthetic data to served scores.
//!
//! Metrics go to stdout as JSON, progress to stderr. Failures print one
//! JSON line on stderr and exit with 3 for a missing input, 2 for bad
//! usage and 1 otherwise.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "uxsid", version, about = "Semantic-ID aware ultra-long sequence CTR pipeline")]
pub struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "UXSID_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic world with planted distal interests.
    GenData(GenData),
    /// Fit residual k-means codebooks on content vectors.
    TrainCodebook(TrainCodebook),
    /// Assign semantic IDs to items with a trained codebook.
    Encode(Encode),
    /// Train a CTR model.
    Train(Train),
    /// Score a split and print AUC, UAUC, WUAUC and Int.R@k.
    Evaluate(Evaluate),
    /// Build the per-(user, SID) embedding store.
    Precompute(Precompute),
    /// Compare cached entries against fresh recomputation.
    Parity(Parity),
    /// Time online ranking and soft GSU retrieval at several lengths.
    BenchLatency(BenchLatency),
    /// Train every strategy at several sequence lengths and report AUC.
    CompareBaselines(CompareBaselines),
    /// Rebuild an embedding store and swap it into place.
    Refresh(Refresh),
}

#[derive(Args, Debug)]
pub struct Seed {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GenData {
    /// World parameters as JSON; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: Seed,
}

#[derive(Args, Debug)]
pub struct TrainCodebook {
    /// Content vectors, one JSON object per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub levels: usize,
    #[arg(long, default_value_t = 256)]
    pub codewords: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: Seed,
}

#[derive(Args, Debug)]
pub struct Encode {
    #[arg(long)]
    pub codebook: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Train {
    #[arg(long)]
    pub data: PathBuf,
    /// Item SIDs; defaults to `sids.jsonl` inside the data directory.
    #[arg(long)]
    pub sids: Option<PathBuf>,
    /// `{"model": {...}, "train": {...}}`; omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: Seed,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct Evaluate {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct Precompute {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Parity {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub sample: usize,
    #[command(flatten)]
    pub seed: Seed,
}

#[derive(Args, Debug)]
pub struct BenchLatency {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1000,10000")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub impressions: usize,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub seed: Seed,
}

#[derive(Args, Debug)]
pub struct CompareBaselines {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sids: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "100,1000,2000,10000")]
    pub lengths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "uxsid,din,sim-hard,sim-soft")]
    pub strategies: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: Seed,
}

#[derive(Args, Debug)]
pub struct Refresh {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Store file replaced in place.
    #[arg(long)]
    pub store: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return commands::report(&anyhow::anyhow!(e));
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => commands::report(&e),
    }
}
