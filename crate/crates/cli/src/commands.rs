use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use peft_forge::checkpoint::{Checkpoint, Section};
use peft_forge::compress::{compress_model, CompressOptions, CompressReport};
use peft_forge::datapipe::{
    build_annotation_requests, build_splits, default_templates, emit_annotations, filter_review, filter_size,
    frame_manifest, ingest_annotation_responses, ingest_metadata_file, make_pairs, read_review_scores,
    serialize_annotations, ImagePair, MissingScore, Reject, RequestFile, ResponseFile, SplitManifest,
};
use peft_forge::metrics::{
    evaluate_corpus, read_paired_files, read_tsv, tokenize, BleuConfig, EmbeddingProvider, EmbeddingTable,
    HashProjection, OneHot,
};
use peft_forge::prune::PruneMode;
use peft_forge::trainer::{evaluate_loss, teacher_task, Dataset, TeacherSpec, ToyModel, TrainConfig, Trainer};
use peft_forge::Error;

use crate::{
    Cli, Command, CompressArgs, ConfigArgs, EmbeddingArg, EmitArgs, EvalArgs, ModeArg, PairArgs, RequestsArgs,
    SplitArgs, SynthArgs, TrainArgs,
};

/// Exit status for an error: 1 i/o or other, 3 format, 4 consistency,
/// 5 numeric, 6 invalid parameter or shape. Usage errors exit with 2 from
/// the argument parser.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Format(_)) => 3,
        Some(Error::Consistency(_)) => 4,
        Some(Error::Numeric(_)) => 5,
        Some(Error::Parameter(_) | Error::Shape { .. }) => 6,
        Some(Error::Io { .. }) | None => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Pair(a) => pair(a, seed.unwrap_or(0)),
        Command::Split(a) => split(a, seed.unwrap_or(0)),
        Command::Requests(a) => requests(a),
        Command::Emit(a) => emit(a, seed.unwrap_or(0)),
        Command::Synth(a) => synth(a, seed.unwrap_or(0)),
        Command::Config(a) => config(a),
        Command::Train(a) => train(a, seed),
        Command::Compress(a) => compress(a),
        Command::Eval(a) => eval(a, seed.unwrap_or(0)),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e).into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
        .map_err(Into::into)
}

fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ckpt.write(path).map_err(Into::into)
}

const PAIR_FORMAT: &str = "peft-forge/pairs";

#[derive(Debug, Serialize, Deserialize)]
struct PairFile {
    format: String,
    version: u32,
    seed: u64,
    pairs: Vec<ImagePair>,
}

impl PairFile {
    fn new(seed: u64, pairs: Vec<ImagePair>) -> Self {
        PairFile {
            format: PAIR_FORMAT.to_string(),
            version: 1,
            seed,
            pairs,
        }
    }

    fn load(path: &Path) -> Result<Self> {
        let f: PairFile = read_json(path)?;
        if f.format != PAIR_FORMAT {
            return Err(Error::format(format!("{}: not a pair file ({})", path.display(), f.format)).into());
        }
        Ok(f)
    }
}

#[derive(Debug, Serialize)]
struct SizeExclusion {
    image_id: String,
    byte_size: u64,
}

#[derive(Debug, Serialize)]
struct PairStats {
    seed: u64,
    max_bytes: u64,
    records: usize,
    rejected: usize,
    excluded_by_size: usize,
    locations: usize,
    pairs: usize,
    rejects: Vec<Reject>,
    size_exclusions: Vec<SizeExclusion>,
}

fn pair(a: PairArgs, seed: u64) -> Result<()> {
    let ingested = ingest_metadata_file(&a.metadata)?;
    let (kept, excluded) = filter_size(&ingested.records, a.max_bytes)?;
    let pairs = make_pairs(&kept);
    for p in &pairs {
        if !p.is_valid() {
            return Err(Error::consistency(format!("pair {} violates the pairing rules", p.id())).into());
        }
    }
    let locations = kept
        .iter()
        .map(|r| &r.location_id)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let stats = PairStats {
        seed,
        max_bytes: a.max_bytes,
        records: ingested.records.len(),
        rejected: ingested.rejects.len(),
        excluded_by_size: excluded.len(),
        locations,
        pairs: pairs.len(),
        rejects: ingested.rejects,
        size_exclusions: excluded
            .iter()
            .map(|r| SizeExclusion {
                image_id: r.image_id.clone(),
                byte_size: r.byte_size,
            })
            .collect(),
    };
    println!(
        "{} records, {} rejected, {} over {} bytes, {} pairs",
        stats.records, stats.rejected, stats.excluded_by_size, stats.max_bytes, stats.pairs
    );
    if let Some(path) = &a.frames {
        write_json(path, &frame_manifest(&pairs))?;
    }
    if let Some(path) = &a.stats {
        write_json(path, &stats)?;
    }
    write_json(&a.out, &PairFile::new(seed, pairs))
}

#[derive(Debug, Serialize)]
struct SplitOutput {
    manifest: SplitManifest,
    review_threshold: Option<u8>,
    review_dropped: Vec<(String, String)>,
}

fn split(a: SplitArgs, seed: u64) -> Result<()> {
    let pairs = PairFile::load(&a.pairs)?.pairs;
    let mut s = build_splits(&pairs, a.train, a.test, seed, a.location_disjoint)?;
    let mut dropped = Vec::new();
    if let Some(path) = &a.reviews {
        let scores = read_review_scores(&read_text(path)?)?;
        let test = filter_review(&s.test, &scores, a.threshold, MissingScore::for_test_split(true))?;
        let train = filter_review(&s.train, &scores, a.threshold, MissingScore::for_test_split(false))?;
        s.test = test.kept;
        s.train = train.kept;
        dropped.extend(test.dropped);
        dropped.extend(train.dropped);
    }
    println!(
        "train {} pairs, test {} pairs, {} dropped by review",
        s.train.len(),
        s.test.len(),
        dropped.len()
    );
    write_json(&a.out_dir.join("train.json"), &PairFile::new(seed, s.train))?;
    write_json(&a.out_dir.join("test.json"), &PairFile::new(seed, s.test))?;
    write_json(
        &a.out_dir.join("manifest.json"),
        &SplitOutput {
            manifest: s.manifest,
            review_threshold: a.reviews.as_ref().map(|_| a.threshold),
            review_dropped: dropped,
        },
    )
}

fn requests(a: RequestsArgs) -> Result<()> {
    let pairs = PairFile::load(&a.pairs)?.pairs;
    let file = build_annotation_requests(&pairs);
    println!("{} requests", file.requests.len());
    write_text(&a.out, &file.to_json())
}

fn emit(a: EmitArgs, seed: u64) -> Result<()> {
    let mut pairs = PairFile::load(&a.pairs)?.pairs;
    let reqs = RequestFile::from_json(&read_text(&a.requests)?)?;
    let resps = ResponseFile::from_json(&read_text(&a.responses)?)?;
    let joined = ingest_annotation_responses(&reqs, &resps)?;
    for id in &joined.unmatched {
        eprintln!("warning: response {id} matches no request");
    }
    if a.skip_unanswered {
        pairs.retain(|p| joined.annotations.contains_key(&p.id()));
    }
    let templates = match &a.templates {
        Some(path) => read_text(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect(),
        None => default_templates(),
    };
    let out = emit_annotations(&pairs, &joined.annotations, &templates, seed, a.max_length)?;
    for id in &out.over_length {
        eprintln!("warning: record {id} exceeds {} words", a.max_length);
    }
    println!(
        "{} records, {} unanswered requests, {} over length",
        out.records.len(),
        joined.unanswered.len(),
        out.over_length.len()
    );
    write_text(&a.out, &serialize_annotations(&out.records))
}

fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    let spec = TeacherSpec {
        dims: a.dims,
        delta_rank: a.delta_rank,
        delta_scale: a.delta_scale,
        noise_std: a.noise_std,
        train_samples: a.train_samples,
        validation_samples: a.validation_samples,
        seed,
    };
    let (model, data) = teacher_task(&spec)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut ckpt = Checkpoint::new();
    ckpt.push("run", Section::Meta(serde_json::to_string(&spec)?))?;
    model.to_checkpoint(&mut ckpt)?;
    ckpt.write(a.out_dir.join("base.pfck"))?;
    write_json(&a.out_dir.join("data.json"), &data)?;
    println!(
        "{} layers, {} train / {} validation samples",
        model.layers().len(),
        data.train.len(),
        data.validation.len()
    );
    Ok(())
}

fn config(a: ConfigArgs) -> Result<()> {
    let text = TrainConfig::default().to_toml();
    match &a.out {
        Some(path) => write_text(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RunMeta {
    seed: u64,
    config: String,
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(bits) = a.use_qlora {
        cfg.use_qlora = true;
        cfg.qlora_bits = bits;
    }
    if a.no_qlora {
        cfg.use_qlora = false;
    }
    cfg.validate()?;
    let model = ToyModel::from_checkpoint(&Checkpoint::read(&a.base)?)
        .with_context(|| format!("loading bases from {}", a.base.display()))?;
    let data: Dataset = read_json(&a.data)?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let report = trainer.train_loop(&data)?;
    println!(
        "{} steps, train loss {:.6} -> {:.6} ({:.2}s)",
        report.steps, report.initial_train_loss, report.final_train_loss, report.wall_time_secs
    );
    let mut ckpt = Checkpoint::new();
    ckpt.push(
        "run",
        Section::Meta(serde_json::to_string(&RunMeta {
            seed: cfg.seed,
            config: cfg.to_toml(),
        })?),
    )?;
    trainer.model().to_checkpoint(&mut ckpt)?;
    write_checkpoint(&ckpt, &a.out)?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CompressOutput {
    #[serde(flatten)]
    report: CompressReport,
    loss_before: Option<f64>,
    loss_after: Option<f64>,
}

fn compress(a: CompressArgs) -> Result<()> {
    let ckpt = Checkpoint::read(&a.checkpoint)?;
    let model = ToyModel::from_checkpoint(&ckpt)?;
    let opts = CompressOptions {
        prune: a.prune,
        prune_mode: match a.prune_mode {
            ModeArg::Global => PruneMode::Global,
            ModeArg::PerLayer => PruneMode::PerLayer,
        },
        exclude: a.exclude,
        quant_bits: a.quant,
    };
    let (compressed, report) = compress_model(&model, &opts)?;
    let (loss_before, loss_after) = match &a.data {
        Some(path) => {
            let data: Dataset = read_json(path)?;
            let set = if data.validation.is_empty() {
                &data.train
            } else {
                &data.validation
            };
            (
                Some(evaluate_loss(&model, set)?),
                Some(evaluate_loss(&compressed, set)?),
            )
        }
        None => (None, None),
    };
    if let Some(s) = &report.sparsity {
        println!("sparsity {:.4} over {} weights", s.global_achieved, s.total_elements);
    }
    println!(
        "stages {}; {} bytes ({:.1}% of 16-bit)",
        report.stages.join(" -> "),
        report.total_bytes,
        100.0 * report.total_ratio
    );
    let mut out = Checkpoint::new();
    if let Some(Section::Meta(meta)) = ckpt.get("run") {
        out.push("run", Section::Meta(meta.clone()))?;
    }
    out.push("compress", Section::Meta(serde_json::to_string(&opts)?))?;
    compressed.to_checkpoint(&mut out)?;
    write_checkpoint(&out, &a.out)?;
    if let Some(path) = &a.report {
        write_json(
            path,
            &CompressOutput {
                report,
                loss_before,
                loss_after,
            },
        )?;
    }
    Ok(())
}

fn eval(a: EvalArgs, seed: u64) -> Result<()> {
    let pairs = match (&a.tsv, &a.candidates, &a.references) {
        (Some(tsv), _, _) => read_tsv(&read_text(tsv)?).with_context(|| tsv.display().to_string())?,
        (None, Some(c), Some(r)) => read_paired_files(c, r)?,
        _ => bail!(Error::param("give --tsv or both --candidates and --references")),
    };
    let emb: Box<dyn EmbeddingProvider> = match a.embeddings {
        EmbeddingArg::Onehot => {
            let seqs: Vec<_> = pairs.iter().flat_map(|(c, r)| [tokenize(c), tokenize(r)]).collect();
            Box::new(OneHot::fit(&seqs))
        }
        EmbeddingArg::Hash => Box::new(HashProjection::new(a.embedding_dim, seed)?),
        EmbeddingArg::Table => {
            let path = a.embedding_table.as_ref().expect("required by the parser");
            Box::new(EmbeddingTable::load(path, seed)?)
        }
    };
    let report = evaluate_corpus(&a.label, &pairs, &BleuConfig::default(), emb.as_ref())?;
    let table = report.table();
    print!("{table}");
    let degenerate: BTreeMap<usize, &Vec<String>> = report
        .pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.notes.is_empty())
        .map(|(i, p)| (i + 1, &p.notes))
        .collect();
    for (line, notes) in degenerate {
        eprintln!("note: pair {line}: {}", notes.join(", "));
    }
    if let Some(path) = &a.table {
        write_text(path, &table)?;
    }
    if let Some(path) = &a.out {
        write_text(path, &report.to_json())?;
    }
    Ok(())
}
