mod config;

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cecomp::cecache::{CeCache, EvictionPolicy};
use cecomp::checkpoint::TensorBundle;
use cecomp::compressor::{CompressedSegment, CompressionConfig, Compressor, CompressorParams};
use cecomp::distill::{AnswerSource, DistillContext, TrainState, Trainer};
use cecomp::evalgen::{evaluate, make_corpus, read_corpus, write_corpus, EvalResult, EvalSetup, SyntheticSpec, Variant};
use cecomp::pipeline::{answer, answer_from_ces, bench_sweep, CostReport, InferenceRequest};
use cecomp::segmenter::{segment, Tokenizer, SEP};
use cecomp::tinylm::ModelParams;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "cecomp", version, about = "Segment-wise context compression into concept embeddings")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic key-value retrieval corpus as JSON lines.
    MakeCorpus(MakeCorpusArgs),
    /// Train the compressor by activation distillation.
    Train(TrainArgs),
    /// Compress a text file into one CE blob per segment plus a manifest.
    Compress(CompressArgs),
    /// Answer a question about a context file or precomputed CEs.
    Generate(GenerateArgs),
    /// Cost sweep over context lengths, with and without compression.
    Bench(BenchArgs),
    /// Exact-match evaluation on a corpus file.
    Eval(EvalArgs),
}

#[derive(Args)]
struct MakeCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n_samples: usize,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    n_facts: u64,
    #[arg(long, default_value_t = 2)]
    filler_per_fact: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnswerArg {
    Dataset,
    Teacher,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint manifest path; a `.bin` blob is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Tab-separated step/loss log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Rewrite the checkpoint every this many steps (0 = only at the end).
    #[arg(long, default_value_t = 100)]
    checkpoint_every: u64,
    #[arg(long, value_enum, default_value = "dataset")]
    answers: AnswerArg,
}

#[derive(Args)]
struct ModelArgs {
    /// Trained compressor checkpoint; defaults to the seeded initialisation.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    compression_rate: Option<usize>,
    #[arg(long)]
    max_segment_tokens: Option<usize>,
}

#[derive(Args)]
struct CacheArgs {
    /// Directory for persisted CE cache entries.
    #[arg(long, env = "CECOMP_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
    /// Print cache hits, misses and entries after the run.
    #[arg(long)]
    cache_stats: bool,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct GenerateArgs {
    /// Context text file.
    #[arg(long, conflicts_with = "ces", required_unless_present = "ces")]
    context: Option<PathBuf>,
    /// CE manifest written by `compress`.
    #[arg(long)]
    ces: Option<PathBuf>,
    #[arg(long)]
    question: String,
    /// Feed the context as plain token embeddings.
    #[arg(long, conflicts_with = "ces")]
    no_compress: bool,
    #[arg(long, default_value_t = 32)]
    max_new_tokens: usize,
    /// Print answer and cost report as one JSON object.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    cache: CacheArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096,8192")]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    max_new_tokens: usize,
    /// Write the JSON summary (slopes, ratios, crossovers) here.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    cache: CacheArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Both,
    Compressed,
    Uncompressed,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    variant: VariantArg,
    #[arg(long, default_value_t = 8)]
    max_new_tokens: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    cache: CacheArgs,
}

/// Index of the blobs written by `compress`.
#[derive(Debug, Serialize, Deserialize)]
struct CeManifest {
    format: String,
    compressor_version: String,
    base_digest: String,
    compression: CompressionConfig,
    segments: Vec<CeEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CeEntry {
    file: String,
    source_hash: String,
    n_ces: usize,
    origin_span: (usize, usize),
}

const CE_MANIFEST_FORMAT: &str = "cecomp-ce-manifest";

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::MakeCorpus(a) => cmd_make_corpus(a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Compress(a) => cmd_compress(cfg, a),
        Command::Generate(a) => cmd_generate(cfg, a),
        Command::Bench(a) => cmd_bench(cfg, a),
        Command::Eval(a) => cmd_eval(cfg, a),
    }
}

fn base_model(cfg: &RunConfig) -> Result<ModelParams<f32>> {
    Ok(ModelParams::init(&cfg.model, cfg.model_seed)?)
}

fn read_checkpoint(path: &Path, model: &ModelParams<f32>) -> Result<TrainState> {
    let bundle = TensorBundle::read_pair(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(TrainState::from_bundle(&bundle, model)?)
}

fn write_checkpoint(path: &Path, state: &TrainState, model: &ModelParams<f32>, cfg: &RunConfig) -> Result<()> {
    let mut bundle = state.to_bundle(&model.digest());
    bundle.meta.insert("model_seed".into(), cfg.model_seed.to_string());
    bundle.meta.insert("model_config".into(), serde_json::to_string(&cfg.model)?);
    bundle.write_pair(path)?;
    Ok(())
}

fn compressor_params(cfg: &RunConfig, model: &ModelParams<f32>, args: &ModelArgs) -> Result<CompressorParams<f32>> {
    match &args.checkpoint {
        Some(p) => Ok(read_checkpoint(p, model)?.params),
        None => Ok(CompressorParams::init(&cfg.model, cfg.lora, cfg.compressor_seed)),
    }
}

fn compression_config(cfg: &RunConfig, args: &ModelArgs) -> Result<CompressionConfig> {
    let mut c = cfg.compression;
    if let Some(r) = args.compression_rate {
        c.compression_rate = r;
    }
    if let Some(s) = args.max_segment_tokens {
        c.max_segment_tokens = s;
    }
    c.validate()?;
    Ok(c)
}

fn open_cache(cfg: &RunConfig, args: &CacheArgs) -> Result<Option<CeCache>> {
    let dir = args.cache_dir.clone().or_else(|| cfg.cache_dir.clone());
    Ok(match dir {
        Some(d) => Some(CeCache::with_dir(d, EvictionPolicy::Unbounded)?),
        None if args.cache_stats => Some(CeCache::in_memory(EvictionPolicy::Unbounded)),
        None => None,
    })
}

fn print_cache_stats(cache: Option<&CeCache>) {
    if let Some(c) = cache {
        let s = c.stats();
        println!(
            "cache\thits={}\tmisses={}\tentries={}\tbytes={}\tevictions={}",
            s.hits, s.misses, s.entries, s.bytes, s.evictions
        );
    }
}

/// Question as the model saw it in training: wrapped in separators.
fn instruction_tokens(question: &str) -> Vec<u32> {
    let mut ids = vec![SEP];
    ids.extend(Tokenizer.encode_str(question));
    ids.push(SEP);
    ids
}

fn cmd_make_corpus(a: MakeCorpusArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_samples: a.n_samples,
        n_facts: a.n_facts as usize,
        filler_sentences_per_fact: a.filler_per_fact,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    let corpus = make_corpus(&spec)?;
    let f = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(f);
    write_corpus(&corpus, &mut w)?;
    w.flush()?;
    info!("wrote {} records to {}", corpus.len(), a.out.display());
    Ok(())
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(n) = a.max_steps {
        cfg.train.max_steps = n;
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let model = base_model(&cfg)?;
    let base_digest = model.digest();
    println!("base_digest\t{base_digest}");

    let f = File::open(&a.corpus).with_context(|| format!("opening {}", a.corpus.display()))?;
    let corpus = read_corpus(BufReader::new(f))?;
    let source = match a.answers {
        AnswerArg::Dataset => AnswerSource::DatasetProvided,
        AnswerArg::Teacher => AnswerSource::TeacherGenerated,
    };
    let samples = corpus.iter().map(|r| r.to_distill_sample(source)).collect();
    let state = match &a.resume {
        Some(p) => read_checkpoint(p, &model)?,
        None => TrainState::new(CompressorParams::init(&cfg.model, cfg.lora, cfg.compressor_seed)),
    };
    let resumed = a.resume.is_some();
    info!("starting at step {} of {}", state.step, cfg.train.max_steps);

    let ctx = DistillContext::new(&model, cfg.compression);
    let mut trainer = Trainer::new(ctx, cfg.train.clone(), samples, state)?;
    let mut log = match &a.log {
        Some(p) => {
            let append = resumed && p.exists();
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(p)
                .with_context(|| format!("opening log {}", p.display()))?;
            let mut w = BufWriter::new(f);
            if !append {
                writeln!(w, "step\tloss")?;
            }
            Some(w)
        }
        None => None,
    };

    while trainer.state.step < cfg.train.max_steps {
        let out = match trainer.step() {
            Ok(o) => o,
            Err(e) => {
                write_checkpoint(&a.out, &trainer.state, &model, &cfg)?;
                return Err(e).context("training stopped; last good state checkpointed");
            }
        };
        let step = trainer.state.step;
        if let Some(w) = log.as_mut() {
            writeln!(w, "{step}\t{:.8}", out.loss)?;
        }
        if step % 50 == 0 {
            info!("step {step} loss {:.6}", out.loss);
        }
        if a.checkpoint_every > 0 && step % a.checkpoint_every == 0 {
            write_checkpoint(&a.out, &trainer.state, &model, &cfg)?;
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    write_checkpoint(&a.out, &trainer.state, &model, &cfg)?;
    let after = model.digest();
    if after != base_digest {
        bail!("base model changed during training");
    }
    println!("base_digest_after\t{after}");
    println!("compressor_digest\t{}", trainer.state.params.digest());
    println!("steps\t{}", trainer.state.step);
    Ok(())
}

fn cmd_compress(cfg: RunConfig, a: CompressArgs) -> Result<()> {
    let model = base_model(&cfg)?;
    let params = compressor_params(&cfg, &model, &a.model)?;
    let comp_cfg = compression_config(&cfg, &a.model)?;
    let compressor = Compressor::new(&model, &params, comp_cfg)?;
    let text = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let ids = Tokenizer.encode(&text);
    let segments = segment(&ids, &comp_cfg.segmentation())?;
    let (ces, pairs) = compressor.compress_segments(&segments)?;

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut entries = Vec::with_capacity(ces.len());
    for (i, (seg, ce)) in segments.iter().zip(&ces).enumerate() {
        let file = format!("seg-{i:05}.ceblob");
        ce.to_bundle().write_single(&a.out_dir.join(&file))?;
        entries.push(CeEntry {
            file,
            source_hash: ce.source_hash.clone(),
            n_ces: ce.len(),
            origin_span: seg.origin_span,
        });
    }
    let manifest = CeManifest {
        format: CE_MANIFEST_FORMAT.into(),
        compressor_version: compressor.version().to_string(),
        base_digest: model.digest(),
        compression: comp_cfg,
        segments: entries,
    };
    let path = a.out_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "segments\t{}\tces\t{}\tcompression_pairs\t{}\tmanifest\t{}",
        segments.len(),
        manifest.segments.iter().map(|e| e.n_ces).sum::<usize>(),
        pairs,
        path.display()
    );
    Ok(())
}

fn read_ce_manifest(path: &Path, model: &ModelParams<f32>) -> Result<Vec<CompressedSegment<f32>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: CeManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if manifest.format != CE_MANIFEST_FORMAT {
        bail!("{} is not a CE manifest", path.display());
    }
    if manifest.base_digest != model.digest() {
        bail!("CEs in {} were made for a different base model", path.display());
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    manifest
        .segments
        .iter()
        .map(|e| {
            let seg = CompressedSegment::from_bundle(&TensorBundle::read_single(&dir.join(&e.file))?)?;
            if seg.source_hash != e.source_hash {
                bail!("blob {} does not match its manifest entry", e.file);
            }
            Ok(seg)
        })
        .collect()
}

#[derive(Serialize)]
struct GenerateOutput<'a> {
    answer: &'a str,
    cost: &'a CostReport,
}

fn cmd_generate(cfg: RunConfig, a: GenerateArgs) -> Result<()> {
    let model = base_model(&cfg)?;
    let question = instruction_tokens(&a.question);
    let cache = open_cache(&cfg, &a.cache)?;
    let (text, report) = match (&a.ces, &a.context) {
        (Some(manifest), _) => {
            let ces = read_ce_manifest(manifest, &model)?;
            answer_from_ces(&model, &ces, &question, a.max_new_tokens, true)?
        }
        (None, Some(ctx_path)) => {
            let params = compressor_params(&cfg, &model, &a.model)?;
            let comp_cfg = compression_config(&cfg, &a.model)?;
            let ctx = fs::read(ctx_path).with_context(|| format!("reading {}", ctx_path.display()))?;
            let req = InferenceRequest {
                context_tokens: Tokenizer.encode(&ctx),
                question_tokens: question,
                use_compression: !a.no_compress,
                max_new_tokens: a.max_new_tokens,
                stop_at_eos: true,
            };
            answer(&model, &params, &comp_cfg, &req, cache.as_ref())?
        }
        (None, None) => bail!("either --context or --ces is required"),
    };
    if a.json {
        println!("{}", serde_json::to_string(&GenerateOutput { answer: &text, cost: &report })?);
    } else {
        println!("{text}");
        eprintln!("{}", serde_json::to_string(&report)?);
    }
    if a.cache.cache_stats {
        print_cache_stats(cache.as_ref());
    }
    Ok(())
}

fn cmd_bench(cfg: RunConfig, a: BenchArgs) -> Result<()> {
    let model = base_model(&cfg)?;
    let params = compressor_params(&cfg, &model, &a.model)?;
    let comp_cfg = compression_config(&cfg, &a.model)?;
    let cache = open_cache(&cfg, &a.cache)?;
    let table = bench_sweep(&model, &params, &comp_cfg, &a.lengths, a.max_new_tokens, cache.as_ref())?;
    print!("{}", table.to_tsv());
    let summary = table.summary();
    let json = serde_json::to_string_pretty(&summary)?;
    match &a.summary {
        Some(p) => fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?,
        None => eprintln!("{json}"),
    }
    if a.cache.cache_stats {
        print_cache_stats(cache.as_ref());
    }
    Ok(())
}

fn cmd_eval(cfg: RunConfig, a: EvalArgs) -> Result<()> {
    let model = base_model(&cfg)?;
    let params = compressor_params(&cfg, &model, &a.model)?;
    let comp_cfg = compression_config(&cfg, &a.model)?;
    let cache = open_cache(&cfg, &a.cache)?;
    let f = File::open(&a.corpus).with_context(|| format!("opening {}", a.corpus.display()))?;
    let corpus = read_corpus(BufReader::new(f))?;
    let setup = EvalSetup {
        model: &model,
        params: &params,
        compression: comp_cfg,
        max_new_tokens: a.max_new_tokens,
    };
    let variants: &[Variant] = match a.variant {
        VariantArg::Both => &[Variant::Compressed, Variant::Uncompressed],
        VariantArg::Compressed => &[Variant::Compressed],
        VariantArg::Uncompressed => &[Variant::Uncompressed],
    };
    let results = variants
        .iter()
        .map(|&v| evaluate(&setup, &corpus, v, cache.as_ref()))
        .collect::<cecomp::Result<Vec<_>>>()?;
    print!("{}", eval_table(&results));
    if a.cache.cache_stats {
        print_cache_stats(cache.as_ref());
    }
    Ok(())
}

fn eval_table(results: &[EvalResult]) -> String {
    let positions: BTreeSet<usize> = results.iter().flat_map(|r| r.per_position.keys().copied()).collect();
    let mut out = String::from("variant\tsamples\texact_match\tcompression_pairs");
    for p in &positions {
        out.push_str(&format!("\tpos{p}"));
    }
    out.push('\n');
    for r in results {
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{}",
            r.variant, r.samples, r.exact_match_rate, r.compression_pairs
        ));
        let acc = r.position_accuracy();
        for p in &positions {
            match acc.get(p) {
                Some(v) => out.push_str(&format!("\t{v:.4}")),
                None => out.push_str("\t-"),
            }
        }
        out.push('\n');
    }
    out
}
