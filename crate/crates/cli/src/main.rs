use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use cropvqa::backends::conformance::{run_conformance, Outcome};
use cropvqa::backends::server::{serve, ServedBackends};
use cropvqa::backends::synthetic::{
    MarkerDetector, MarkerSaliency, MarkerSegmenter, MarkerTargetScorer, ScriptedEntry,
    ScriptedVqaModel,
};
use cropvqa::backends::BackendIdentity;
use cropvqa::datasets::{
    attach_derived_boxes, fill_image_sizes, ingest_textvqa, ingest_vqav2, read_records,
    write_records, SimilarityMeasure, DEFAULT_MIN_SIMILARITY,
};
use cropvqa::fixtures::{write_fixture, SyntheticSpec, UNKNOWN_ANSWER};
use cropvqa::harness::report::{load_run, table_to_markdown, tables};
use cropvqa::harness::{
    emit_report, measure_timing, resolve_backends, run_with_backends, select_records,
    BackendConfig, DatasetSpec, EndpointConfig, ReportFormat, RunConfig, RunData,
};
use cropvqa::metrics::MetricVariant;
use cropvqa::strategies::{FeedMode, StrategyConfig, StrategyKind};

/// Question-guided visual cropping for zero-shot VQA.
#[derive(Parser)]
#[command(name = "crop-vqa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate one strategy on a dataset.
    Run(RunArgs),
    /// Measure mean crop-stage latency per strategy.
    Timing(TimingArgs),
    /// Re-aggregate per-question files into report tables.
    Report(ReportArgs),
    /// Convert official dataset files into normalized records.
    Ingest(IngestArgs),
    /// Write a seeded synthetic dataset with planted targets.
    Synth(SynthArgs),
    /// Serve the synthetic backends over the wire protocol.
    ServeStub(ServeArgs),
    /// Check a backend server against the wire protocol.
    Conformance(ConformanceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Feed {
    Concat,
    CropOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Paper,
    OfficialSubsets,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Md,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetFormat {
    Vqav2,
    Textvqa,
}

#[derive(Clone, Copy, ValueEnum)]
enum Similarity {
    Levenshtein,
    JaroWinkler,
}

#[derive(Args)]
struct DatasetArgs {
    /// Normalized records file (line-delimited JSON).
    #[arg(long)]
    dataset: PathBuf,
    /// Dataset label in reports; defaults to the file's parent directory name.
    #[arg(long)]
    name: Option<String>,
    /// Evaluate a random subset of this many questions.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DatasetArgs {
    fn spec(&self) -> DatasetSpec {
        let name = self.name.clone().unwrap_or_else(|| {
            self.dataset
                .canonicalize()
                .ok()
                .and_then(|p| p.parent()?.file_name().map(|n| n.to_string_lossy().into_owned()))
                .unwrap_or_else(|| "dataset".into())
        });
        DatasetSpec {
            records: self.dataset.clone(),
            name,
            subset: self.subset,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct BackendArgs {
    /// Use the in-process synthetic backends instead of endpoints.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, env = "CROPVQA_SCORER_URL")]
    scorer_url: Option<String>,
    #[arg(long, env = "CROPVQA_DETECTOR_URL")]
    detector_url: Option<String>,
    #[arg(long, env = "CROPVQA_SEGMENTER_URL")]
    segmenter_url: Option<String>,
    #[arg(long, env = "CROPVQA_VQA_URL")]
    vqa_url: Option<String>,
    #[arg(long, env = "CROPVQA_SALIENCY_URL")]
    saliency_url: Option<String>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
}

impl BackendArgs {
    fn config(&self) -> Result<BackendConfig> {
        let ep = EndpointConfig {
            scorer_url: self.scorer_url.clone(),
            detector_url: self.detector_url.clone(),
            segmenter_url: self.segmenter_url.clone(),
            vqa_url: self.vqa_url.clone(),
            saliency_url: self.saliency_url.clone(),
            timeout_secs: self.timeout,
        };
        let any_url = [
            &ep.scorer_url,
            &ep.detector_url,
            &ep.segmenter_url,
            &ep.vqa_url,
            &ep.saliency_url,
        ]
        .iter()
        .any(|u| u.is_some());
        match (self.synthetic, any_url) {
            (true, true) => bail!("--synthetic cannot be combined with endpoint URLs"),
            (true, false) => Ok(BackendConfig::Synthetic),
            (false, true) => Ok(BackendConfig::Remote(ep)),
            (false, false) => bail!("no backends: pass endpoint URLs or --synthetic"),
        }
    }
}

#[derive(Args)]
struct StrategyArgs {
    #[arg(long, default_value_t = 0.9)]
    ratio: f64,
    #[arg(long, default_value_t = 20)]
    iterations: u32,
    /// Detector confidence threshold.
    #[arg(long, default_value_t = 0.25)]
    conf: f64,
    /// Sliding-window sizes as fractions of the image side.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 0.65, 0.8])]
    windows: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    stride: f64,
    #[arg(long, default_value_t = 0.5)]
    patch_threshold: f64,
    /// Do not consider the full image as a candidate.
    #[arg(long)]
    no_full_image: bool,
    #[arg(long, value_enum, default_value_t = Feed::Concat)]
    feed: Feed,
}

impl StrategyArgs {
    fn config(&self, kind: StrategyKind) -> StrategyConfig {
        StrategyConfig {
            kind,
            ratio: self.ratio,
            iterations: self.iterations,
            detector_conf: self.conf,
            window_fractions: self.windows.clone(),
            window_stride_fraction: self.stride,
            patch_threshold: self.patch_threshold,
            include_full_image_candidate: !self.no_full_image,
            feed_mode: match self.feed {
                Feed::Concat => FeedMode::ConcatWithOriginal,
                Feed::CropOnly => FeedMode::CropOnly,
            },
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long, value_parser = parse_kind)]
    strategy: StrategyKind,
    #[command(flatten)]
    params: StrategyArgs,
    #[arg(long, value_enum, default_value_t = Metric::Paper)]
    metric: Metric,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Response cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Output directory for per-question files and report tables.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Start over instead of resuming from an existing output directory.
    #[arg(long)]
    no_resume: bool,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = vec![Format::Csv, Format::Md])]
    format: Vec<Format>,
    #[command(flatten)]
    backends: BackendArgs,
}

#[derive(Args)]
struct TimingArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long, value_delimiter = ',', value_parser = parse_kind, required = true)]
    strategies: Vec<StrategyKind>,
    #[command(flatten)]
    params: StrategyArgs,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 3)]
    measure: usize,
    #[command(flatten)]
    backends: BackendArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// A run's output directory or its records.jsonl; repeatable.
    #[arg(long = "from", required = true)]
    from: Vec<PathBuf>,
    /// Write tables here; without it Markdown goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = vec![Format::Csv, Format::Md])]
    format: Vec<Format>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long, value_enum)]
    format: DatasetFormat,
    #[arg(long)]
    questions: PathBuf,
    /// VQAv2 annotations file.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// TextVQA OCR file.
    #[arg(long)]
    ocr: Option<PathBuf>,
    /// Image directory; questions whose image is missing are skipped.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Derive answer boxes from OCR tokens.
    #[arg(long)]
    derive_boxes: bool,
    #[arg(long, value_enum, default_value_t = Similarity::Levenshtein)]
    similarity: Similarity,
    #[arg(long, default_value_t = DEFAULT_MIN_SIMILARITY)]
    min_similarity: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    width: u32,
    #[arg(long, default_value_t = 192)]
    height: u32,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Records whose majority answers the stub VQA model returns by question text.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    threads: usize,
}

#[derive(Args)]
struct ConformanceArgs {
    #[arg(long)]
    url: String,
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
}

fn parse_kind(s: &str) -> Result<StrategyKind, String> {
    s.parse()
}

fn formats(f: &[Format]) -> Vec<ReportFormat> {
    f.iter()
        .map(|f| match f {
            Format::Csv => ReportFormat::Csv,
            Format::Md => ReportFormat::Markdown,
        })
        .collect()
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let cfg = RunConfig {
        dataset: args.dataset.spec(),
        strategy: args.params.config(args.strategy),
        backends: args.backends.config()?,
        metric: match args.metric {
            Metric::Paper => MetricVariant::Paper,
            Metric::OfficialSubsets => MetricVariant::OfficialSubsets,
        },
        jobs: args.jobs,
        cache_dir: args.cache,
        out_dir: args.out.clone(),
        resume: !args.no_resume,
    };
    cfg.validate()?;
    let records = read_records(&cfg.dataset.records)?;
    let backends = resolve_backends(&cfg, &records)?;
    let report = run_with_backends(&cfg, records, &backends)?;
    if let Some(out) = &args.out {
        emit_report(&report.data(), std::slice::from_ref(&cfg), out, &formats(&args.format))?;
        info!("report written to {}", out.display());
    }
    for c in &report.aggregates.cells {
        println!(
            "{}\t{}\taccuracy {:.2}\tevaluated {}\terrored {}",
            c.method,
            c.dataset,
            c.accuracy * 100.0,
            c.n_evaluated,
            c.n_errored
        );
    }
    Ok(if report.n_errored() > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_timing(args: TimingArgs) -> Result<ExitCode> {
    let spec = args.dataset.spec();
    let strategies: Vec<StrategyConfig> = args
        .strategies
        .iter()
        .map(|k| args.params.config(*k))
        .collect();
    let mut cfg = RunConfig::new(spec, strategies[0].clone());
    cfg.backends = args.backends.config()?;
    let records = read_records(&cfg.dataset.records)?;
    let backends = resolve_backends(&cfg, &records)?;
    let records = select_records(records, &cfg.dataset);
    let results = measure_timing(
        &records,
        &strategies,
        &backends.strategy_backends(),
        args.warmup,
        args.measure,
    )?;
    println!("| method | mean_crop_seconds | n |");
    println!("| --- | --- | --- |");
    for r in results.values() {
        println!("| {} | {:.4} | {} |", r.method, r.mean_seconds, r.n_measured);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode> {
    let mut data = RunData::default();
    let mut configs = Vec::new();
    for p in &args.from {
        let (d, cfg) = load_run(p).with_context(|| format!("loading {}", p.display()))?;
        data.extend(d);
        configs.extend(cfg);
    }
    match &args.out {
        Some(out) => {
            for path in emit_report(&data, &configs, out, &formats(&args.format))? {
                println!("{}", path.display());
            }
        }
        None => {
            for t in tables(&data)? {
                println!("## {}\n\n{}", t.name, table_to_markdown(&t));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_ingest(args: IngestArgs) -> Result<ExitCode> {
    let mut ingested = match args.format {
        DatasetFormat::Vqav2 => {
            let Some(ann) = &args.annotations else {
                bail!("--annotations is required for vqav2");
            };
            ingest_vqav2(&args.questions, ann, args.images.as_deref())?
        }
        DatasetFormat::Textvqa => {
            ingest_textvqa(&args.questions, args.ocr.as_deref(), args.images.as_deref())?
        }
    };
    if args.images.is_some() {
        let n = fill_image_sizes(&mut ingested.records);
        info!("read sizes of {n} images");
    }
    if args.derive_boxes {
        let measure = match args.similarity {
            Similarity::Levenshtein => SimilarityMeasure::Levenshtein,
            Similarity::JaroWinkler => SimilarityMeasure::JaroWinkler,
        };
        let stats = attach_derived_boxes(&mut ingested.records, measure, args.min_similarity);
        println!(
            "boxes: derived {}, no ocr {}, below threshold {} (min similarity {})",
            stats.derived, stats.no_ocr, stats.below_threshold, args.min_similarity
        );
    }
    write_records(&args.out, &ingested.records)?;
    println!(
        "wrote {} records to {} ({} skipped for missing images)",
        ingested.records.len(),
        args.out.display(),
        ingested.skipped_missing_image
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let spec = SyntheticSpec {
        n: args.n,
        seed: args.seed,
        width: args.width,
        height: args.height,
        ..SyntheticSpec::default()
    };
    let path = write_fixture(&args.out, &spec)?;
    println!("{}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(args: ServeArgs) -> Result<ExitCode> {
    let mut vqa = ScriptedVqaModel::new(UNKNOWN_ANSWER);
    if let Some(path) = &args.dataset {
        for r in read_records(path)? {
            if let Some(a) = r.majority_answer() {
                let entry = ScriptedEntry {
                    answer: a.to_string(),
                    planted: None,
                };
                vqa = vqa.with_text(r.question.clone(), entry);
            }
        }
    }
    let backends = ServedBackends {
        scorer: Some(Arc::new(MarkerTargetScorer::new())),
        detector: Some(Arc::new(MarkerDetector)),
        segmenter: Some(Arc::new(MarkerSegmenter)),
        vqa: Some(Arc::new(vqa)),
        saliency: Some(Arc::new(MarkerSaliency::default())),
    };
    let identity = BackendIdentity::new("crop-vqa-stub", env!("CARGO_PKG_VERSION"));
    let handle = serve(&args.addr, backends, identity, args.threads)?;
    println!("listening on {}", handle.url());
    handle.join();
    Ok(ExitCode::SUCCESS)
}

fn cmd_conformance(args: ConformanceArgs) -> Result<ExitCode> {
    let report = run_conformance(&args.url, Duration::from_secs_f64(args.timeout));
    for c in &report.checks {
        let tag = match c.outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
            Outcome::Skip => "SKIP",
        };
        println!("{tag}\t{}\t{}", c.name, c.detail);
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Timing(a) => cmd_timing(a),
        Command::Report(a) => cmd_report(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Synth(a) => cmd_synth(a),
        Command::ServeStub(a) => cmd_serve(a),
        Command::Conformance(a) => cmd_conformance(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
