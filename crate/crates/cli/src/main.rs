use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use entrank::pipeline::{Mode, DEFAULT_DEPTH, DEFAULT_K_QUERY};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "entrank", version, about = "Entity-gated two-stage image retrieval")]
struct Cli {
    /// Worker threads for parallel sections (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate raw image embeddings and write a sorted cache.
    BuildCache(BuildCacheArgs),
    /// Compute per-entity top-k postings against a cache.
    BuildIndex(BuildIndexArgs),
    /// Add postings for new entities to an existing index.
    ExtendIndex(ExtendIndexArgs),
    /// Retrieve images for a single query.
    Query(QueryArgs),
    /// Retrieve images for a query file and write a TREC run.
    Batch(BatchArgs),
    /// Score a run file against qrels.
    Eval(EvalArgs),
    /// Run the batch pipeline at several k_query values and score each.
    Sweep(SweepArgs),
    /// Generate a synthetic corpus with planted targets.
    Synth(SynthArgs),
    /// Compare two-stage latency against an exhaustive scan.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct BuildCacheArgs {
    /// Embedding records in cache layout; ids may be in any order.
    #[arg(long)]
    input: PathBuf,
    /// Output cache path.
    #[arg(long)]
    cache: PathBuf,
    /// Expected dimension; the input is rejected if it differs.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Debug, Args)]
struct EntitySource {
    /// Entity embeddings in cache layout, ids matching a text sidecar.
    #[arg(long, conflicts_with = "entity_names")]
    entities: Option<PathBuf>,
    /// Sidecar for `--entities` [default: <entities>.jsonl].
    #[arg(long, requires = "entities")]
    entities_sidecar: Option<PathBuf>,
    /// Plain text, one entity per line, embedded with the mock encoder.
    #[arg(long)]
    entity_names: Option<PathBuf>,
    /// Mock encoder seed for `--entity-names`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct BuildIndexArgs {
    /// Image embedding cache.
    #[arg(long)]
    cache: PathBuf,
    /// Output index path.
    #[arg(long)]
    index: PathBuf,
    /// Postings kept per entity.
    #[arg(long, default_value_t = DEFAULT_K_QUERY)]
    k_build: usize,
    #[command(flatten)]
    source: EntitySource,
}

#[derive(Debug, Args)]
struct ExtendIndexArgs {
    /// Cache the index was built against.
    #[arg(long)]
    cache: PathBuf,
    /// Existing index.
    #[arg(long)]
    index: PathBuf,
    /// Where to write the extended index [default: overwrite --index].
    #[arg(long)]
    index_out: Option<PathBuf>,
    #[command(flatten)]
    source: EntitySource,
}

#[derive(Debug, Args)]
struct RetrievalArgs {
    /// Image embedding cache.
    #[arg(long)]
    cache: PathBuf,
    /// Entity index built against `--cache`.
    #[arg(long)]
    index: PathBuf,
    /// Postings taken per query entity.
    #[arg(long, default_value_t = DEFAULT_K_QUERY)]
    k_query: usize,
    /// Length of each returned ranking.
    #[arg(long, default_value_t = DEFAULT_DEPTH)]
    depth: usize,
    /// Precomputed summary embeddings in cache layout.
    #[arg(long)]
    summaries: Option<PathBuf>,
    /// Sidecar for `--summaries` [default: <summaries>.jsonl].
    #[arg(long, requires = "summaries")]
    summaries_sidecar: Option<PathBuf>,
    /// Seed of the mock encoder used for summary text.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[command(flatten)]
    retrieval: RetrievalArgs,
    /// Query entity (repeatable).
    #[arg(long = "entity")]
    entities: Vec<String>,
    /// Summary text, embedded with the mock encoder.
    #[arg(long, conflicts_with = "summary_id")]
    summary_text: Option<String>,
    /// Id of a precomputed summary embedding in `--summaries`.
    #[arg(long)]
    summary_id: Option<u64>,
    #[arg(long, default_value_t = 0)]
    query_id: u64,
    /// two_stage, er_only or sr_full.
    #[arg(long, default_value = "two_stage")]
    mode: Mode,
    /// Scan the whole cache when no query entity is indexed.
    #[arg(long)]
    fallback_sr_full: bool,
}

#[derive(Debug, Args)]
struct BatchArgs {
    #[command(flatten)]
    retrieval: RetrievalArgs,
    /// Query file, one JSON object per line.
    #[arg(long)]
    queries: PathBuf,
    /// Output run file.
    #[arg(long)]
    run_out: PathBuf,
    /// two_stage, er_only or sr_full.
    #[arg(long, default_value = "two_stage")]
    mode: Mode,
    /// Run tag [default: entrank-<mode>].
    #[arg(long)]
    tag: Option<String>,
    /// Scan the whole cache when no query entity is indexed.
    #[arg(long)]
    fallback_sr_full: bool,
    /// Per-query candidate statistics as JSON lines.
    #[arg(long)]
    stats_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// TREC run file.
    #[arg(long)]
    run: PathBuf,
    /// Qrels file: `qid 0 docid rel` per line.
    #[arg(long)]
    qrels: PathBuf,
    /// Recall cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "1000")]
    recall_k: Vec<usize>,
    /// MRR cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    mrr_k: Vec<usize>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// k_query values to try.
    #[arg(long, value_delimiter = ',', default_value = "100,1000,10000")]
    k_values: Vec<usize>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    num_images: usize,
    #[arg(long, default_value_t = 100)]
    num_queries: usize,
    #[arg(long, default_value_t = 4)]
    entities_per_query: usize,
    #[arg(long, default_value_t = 200)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Norm of the perturbation added to each summary, in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[arg(long)]
    queries: PathBuf,
    /// Only time the first N queries.
    #[arg(long)]
    limit: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }

    let result = match cli.command {
        Command::BuildCache(a) => commands::build_cache(a),
        Command::BuildIndex(a) => commands::build_index(a),
        Command::ExtendIndex(a) => commands::extend_index(a),
        Command::Query(a) => commands::query(a),
        Command::Batch(a) => commands::batch(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Synth(a) => commands::synth(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
