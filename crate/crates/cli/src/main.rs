use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Parameter-efficient fine-tuning toolkit: temporal pairing, adapter
/// training, compression and text evaluation.
#[derive(Debug, Parser)]
#[command(name = "peft-forge", version, about)]
struct Cli {
    /// Seed for every random choice; recorded in each output.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest metadata, drop oversized images and chain temporal pairs.
    Pair(PairArgs),
    /// Split pairs into train and test sets, optionally filtering by review.
    Split(SplitArgs),
    /// Write annotation requests for an external annotator.
    Requests(RequestsArgs),
    /// Join annotator responses and write conversational records.
    Emit(EmitArgs),
    /// Generate a seeded teacher/student regression task.
    Synth(SynthArgs),
    /// Print or write the default training config.
    Config(ConfigArgs),
    /// Train low-rank adapters on a frozen base.
    Train(TrainArgs),
    /// Merge adapters, then prune and/or quantize.
    Compress(CompressArgs),
    /// Score candidate texts against references.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct PairArgs {
    /// Metadata file (.csv, or .jsonl/.ndjson/.json for JSON lines).
    #[arg(long)]
    metadata: PathBuf,
    /// Output pair file.
    #[arg(long)]
    out: PathBuf,
    /// Images larger than this many bytes are excluded.
    #[arg(long, default_value_t = peft_forge::datapipe::DEFAULT_MAX_BYTES)]
    max_bytes: u64,
    /// Also write ingestion and filtering statistics here.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Also write the frame list of every pair video here.
    #[arg(long)]
    frames: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Pair file from `pair`.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    train: usize,
    #[arg(long)]
    test: usize,
    /// Directory for train.json, test.json and manifest.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Keep every location entirely on one side.
    #[arg(long)]
    location_disjoint: bool,
    /// CSV of `pair_id,score`; unscored test pairs are dropped, unscored
    /// train pairs kept.
    #[arg(long)]
    reviews: Option<PathBuf>,
    #[arg(long, default_value_t = peft_forge::datapipe::DEFAULT_REVIEW_THRESHOLD)]
    threshold: u8,
}

#[derive(Debug, Args)]
struct RequestsArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EmitArgs {
    /// Pair file (or a split file from `split`).
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    requests: PathBuf,
    #[arg(long)]
    responses: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Prompt templates, one per line (default: the shipped five).
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Word limit per record; longer records are reported.
    #[arg(long, default_value_t = 400)]
    max_length: usize,
    /// Leave out pairs without a response instead of failing.
    #[arg(long)]
    skip_unanswered: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Directory for base.pfck and data.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Layer widths, input first.
    #[arg(long, value_delimiter = ',', default_value = "64,64,64")]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    delta_rank: usize,
    #[arg(long, default_value_t = 1.0)]
    delta_scale: f64,
    #[arg(long, default_value_t = 0.3)]
    noise_std: f64,
    #[arg(long, default_value_t = 1000)]
    train_samples: usize,
    #[arg(long, default_value_t = 200)]
    validation_samples: usize,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML config; defaults apply when omitted.
    #[arg(long, env = "PEFT_FORGE_CONFIG")]
    config: Option<PathBuf>,
    /// Checkpoint holding the frozen bases.
    #[arg(long)]
    base: PathBuf,
    /// Dataset JSON from `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Quantize the bases to this many bits (4 or 8) before training.
    #[arg(long)]
    use_qlora: Option<u8>,
    /// Train on full-precision bases even if the config enables QLoRA.
    #[arg(long, conflicts_with = "use_qlora")]
    no_qlora: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Global,
    PerLayer,
}

#[derive(Debug, Args)]
struct CompressArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Target sparsity in [0, 1).
    #[arg(long)]
    prune: Option<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Global)]
    prune_mode: ModeArg,
    /// Layer indices left unpruned.
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<usize>,
    /// Bits per weight (4 or 8).
    #[arg(long)]
    quant: Option<u8>,
    /// Dataset JSON; adds the loss before and after compression to the report.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EmbeddingArg {
    /// One basis vector per token of the corpus.
    Onehot,
    /// Seeded pseudo-random vectors.
    Hash,
    /// Vectors from `--embedding-table`.
    Table,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// One candidate per line.
    #[arg(long, requires = "references", conflicts_with = "tsv")]
    candidates: Option<PathBuf>,
    /// One reference per line, aligned with the candidates.
    #[arg(long, requires = "candidates")]
    references: Option<PathBuf>,
    /// `candidate<TAB>reference` lines with `\t`, `\n`, `\\` escapes.
    #[arg(long)]
    tsv: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EmbeddingArg::Hash)]
    embeddings: EmbeddingArg,
    #[arg(long, default_value_t = 64)]
    embedding_dim: usize,
    /// Whitespace-separated `token v1 v2 ...` table.
    #[arg(long, required_if_eq("embeddings", "table"))]
    embedding_table: Option<PathBuf>,
    /// Row label in the table.
    #[arg(long, default_value = "candidate")]
    label: String,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the fixed-width table here.
    #[arg(long)]
    table: Option<PathBuf>,
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
