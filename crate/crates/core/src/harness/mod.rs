//! Experiment runner: dataset x strategy x backends -> [`RunReport`].
//!
//! Per question the runner resolves a crop, builds the image list for the
//! feed mode, asks the VQA model and scores the answer. Results stream to
//! `progress.jsonl` in the output directory so an interrupted run can be
//! resumed; on completion they are rewritten in dataset order as
//! `records.jsonl` (deterministic) and `timings.jsonl` (wall clock).

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::remote::RemoteBackend;
use crate::backends::{
    BackendError, Detector, RelevanceScorer, SaliencySource, Segmenter, VqaModel, VqaQuery,
};
use crate::datasets::{
    classify_question_type, read_records, size_group_of, DatasetError, QuestionType, SizeGroup,
    VqaRecord,
};
use crate::geometry::{crop_image, GeometryError, Image, Rect};
use crate::metrics::{vqa_accuracy_with, MetricError, MetricVariant};
use crate::strategies::{
    run_strategy, FeedMode, StrategyBackends, StrategyConfig, StrategyError, StrategyKind,
};

pub mod cache;
pub mod report;
pub mod timing;

pub use cache::ScoreCache;
pub use report::{emit_report, Aggregates, ReportFormat, RunData};
pub use timing::measure_timing;

pub const PROGRESS_FILE: &str = "progress.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const CONFIG_FILE: &str = "run.json";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("nothing to report: {0}")]
    EmptyReport(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Every backend a run may use.
#[derive(Clone, Default)]
pub struct BackendSet {
    pub scorer: Option<Arc<dyn RelevanceScorer>>,
    pub detector: Option<Arc<dyn Detector>>,
    pub segmenter: Option<Arc<dyn Segmenter>>,
    pub saliency: Option<Arc<dyn SaliencySource>>,
    pub vqa: Option<Arc<dyn VqaModel>>,
}

impl BackendSet {
    pub fn strategy_backends(&self) -> StrategyBackends {
        StrategyBackends {
            scorer: self.scorer.clone(),
            detector: self.detector.clone(),
            segmenter: self.segmenter.clone(),
            saliency: self.saliency.clone(),
        }
    }

    /// Wraps every backend in the response cache.
    pub fn with_cache(&self, cache: Arc<ScoreCache>) -> BackendSet {
        use cache::*;
        BackendSet {
            scorer: self.scorer.clone().map(|inner| {
                Arc::new(CachedScorer {
                    inner,
                    cache: Arc::clone(&cache),
                }) as Arc<dyn RelevanceScorer>
            }),
            detector: self.detector.clone().map(|inner| {
                Arc::new(CachedDetector {
                    inner,
                    cache: Arc::clone(&cache),
                }) as Arc<dyn Detector>
            }),
            segmenter: self.segmenter.clone().map(|inner| {
                Arc::new(CachedSegmenter {
                    inner,
                    cache: Arc::clone(&cache),
                }) as Arc<dyn Segmenter>
            }),
            saliency: self.saliency.clone().map(|inner| {
                Arc::new(CachedSaliency {
                    inner,
                    cache: Arc::clone(&cache),
                }) as Arc<dyn SaliencySource>
            }),
            vqa: self.vqa.clone().map(|inner| {
                Arc::new(CachedVqa {
                    inner,
                    cache: Arc::clone(&cache),
                }) as Arc<dyn VqaModel>
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Normalized line-delimited records.
    pub records: PathBuf,
    /// Column label in the report tables.
    pub name: String,
    /// Evaluate a uniform random subset of this size.
    pub subset: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub scorer_url: Option<String>,
    pub detector_url: Option<String>,
    pub segmenter_url: Option<String>,
    pub vqa_url: Option<String>,
    pub saliency_url: Option<String>,
    pub timeout_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// In-process planted-target oracles and a scripted VQA model built
    /// from the records' ground-truth boxes.
    Synthetic,
    Remote(EndpointConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub strategy: StrategyConfig,
    pub backends: BackendConfig,
    pub metric: MetricVariant,
    pub jobs: usize,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
}

impl RunConfig {
    pub fn new(dataset: DatasetSpec, strategy: StrategyConfig) -> Self {
        Self {
            dataset,
            strategy,
            backends: BackendConfig::Synthetic,
            metric: MetricVariant::Paper,
            jobs: 1,
            cache_dir: None,
            out_dir: None,
            resume: true,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.jobs == 0 {
            return Err(HarnessError::Config("jobs must be at least 1".into()));
        }
        if self.dataset.subset == Some(0) {
            return Err(HarnessError::Config("subset size must be positive".into()));
        }
        self.strategy
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// The parts of the config that determine per-question results.
    fn fingerprint(&self) -> serde_json::Value {
        serde_json::json!({
            "dataset": self.dataset,
            "strategy": self.strategy,
            "backends": self.backends,
            "metric": self.metric,
        })
    }
}

/// Connects to the configured endpoints, or builds the synthetic set.
pub fn resolve_backends(cfg: &RunConfig, records: &[VqaRecord]) -> Result<BackendSet, HarnessError> {
    let set = match &cfg.backends {
        BackendConfig::Synthetic => crate::fixtures::synthetic_backends(records),
        BackendConfig::Remote(ep) => {
            let timeout = ep
                .timeout_secs
                .map_or(crate::backends::remote::DEFAULT_TIMEOUT, Duration::from_secs_f64);
            let mut clients: HashMap<String, Arc<RemoteBackend>> = HashMap::new();
            let mut connect = |url: &Option<String>| -> Result<Option<Arc<RemoteBackend>>, HarnessError> {
                let Some(url) = url else { return Ok(None) };
                if let Some(c) = clients.get(url) {
                    return Ok(Some(Arc::clone(c)));
                }
                let c = Arc::new(RemoteBackend::connect(url, timeout)?);
                clients.insert(url.clone(), Arc::clone(&c));
                Ok(Some(c))
            };
            BackendSet {
                scorer: connect(&ep.scorer_url)?.map(|c| c as Arc<dyn RelevanceScorer>),
                detector: connect(&ep.detector_url)?.map(|c| c as Arc<dyn Detector>),
                segmenter: connect(&ep.segmenter_url)?.map(|c| c as Arc<dyn Segmenter>),
                saliency: connect(&ep.saliency_url)?.map(|c| c as Arc<dyn SaliencySource>),
                vqa: connect(&ep.vqa_url)?.map(|c| c as Arc<dyn VqaModel>),
            }
        }
    };
    Ok(set)
}

/// One evaluated question. Contains nothing time-dependent, so equal
/// inputs give byte-identical serializations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub dataset: String,
    pub method: StrategyKind,
    pub question_type: QuestionType,
    pub size_group: Option<SizeGroup>,
    pub crop_rect: Option<Rect>,
    pub crop_score: Option<f64>,
    pub crop_fallback: bool,
    pub model_answer: Option<String>,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTiming {
    pub question_id: String,
    pub method: StrategyKind,
    pub crop_seconds: f64,
    pub answer_seconds: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProgressLine {
    record: QuestionRecord,
    timing: QuestionTiming,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub records: Vec<QuestionRecord>,
    pub timings: Vec<QuestionTiming>,
    pub aggregates: Aggregates,
}

impl RunReport {
    pub fn n_errored(&self) -> usize {
        self.aggregates.n_errored
    }

    pub fn data(&self) -> RunData {
        RunData {
            records: self.records.clone(),
            timings: self.timings.clone(),
        }
    }
}

/// Loads a record's image and checks it against the record's metadata.
pub fn load_image(record: &VqaRecord) -> Result<Image, HarnessError> {
    let img = Image::open(&record.image_ref)?;
    if let Some((w, h)) = record.image_size() {
        if (w, h) != (img.width(), img.height()) {
            return Err(HarnessError::Dataset(DatasetError::InvalidRecord {
                id: record.question_id.clone(),
                msg: format!(
                    "image is {}x{}, record says {w}x{h}",
                    img.width(),
                    img.height()
                ),
            }));
        }
    }
    if let Some(b) = record.gt_box {
        if !b.fits_within(img.width(), img.height()) {
            return Err(HarnessError::Dataset(DatasetError::InvalidRecord {
                id: record.question_id.clone(),
                msg: format!("ground-truth box {b} outside the image"),
            }));
        }
    }
    Ok(img)
}

/// Uniform subset (sorted back into dataset order) when configured.
pub fn select_records(records: Vec<VqaRecord>, spec: &DatasetSpec) -> Vec<VqaRecord> {
    match spec.subset {
        Some(n) if n < records.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut idx = rand::seq::index::sample(&mut rng, records.len(), n).into_vec();
            idx.sort_unstable();
            let mut keep = vec![false; records.len()];
            for i in idx {
                keep[i] = true;
            }
            records
                .into_iter()
                .zip(keep)
                .filter_map(|(r, k)| k.then_some(r))
                .collect()
        }
        _ => records,
    }
}

struct Stage {
    record: QuestionRecord,
    timing: QuestionTiming,
}

fn evaluate(
    record: &VqaRecord,
    cfg: &RunConfig,
    backends: &BackendSet,
    strategy_backends: &StrategyBackends,
) -> Stage {
    let mut out = QuestionRecord {
        question_id: record.question_id.clone(),
        dataset: cfg.dataset.name.clone(),
        method: cfg.strategy.kind,
        question_type: classify_question_type(&record.question),
        size_group: size_group_of(record),
        crop_rect: None,
        crop_score: None,
        crop_fallback: false,
        model_answer: None,
        accuracy: None,
        error: None,
    };
    let mut timing = QuestionTiming {
        question_id: record.question_id.clone(),
        method: cfg.strategy.kind,
        crop_seconds: 0.0,
        answer_seconds: 0.0,
    };
    let result = (|| -> Result<(), HarnessError> {
        let img = load_image(record)?;
        let t0 = Instant::now();
        let crop = run_strategy(
            &cfg.strategy,
            strategy_backends,
            &img,
            &record.question,
            record.gt_box,
        )?;
        timing.crop_seconds = t0.elapsed().as_secs_f64();
        out.crop_rect = Some(crop.rect);
        out.crop_score = crop.score;
        out.crop_fallback = crop.fallback;

        let cropped;
        let (images, crop_rect) = if cfg.strategy.kind == StrategyKind::None {
            (vec![&img], None)
        } else {
            cropped = crop_image(&img, &crop.rect)?;
            match cfg.strategy.feed_mode {
                FeedMode::CropOnly => (vec![&cropped], Some(crop.rect)),
                FeedMode::ConcatWithOriginal => (vec![&img, &cropped], Some(crop.rect)),
            }
        };
        let query = VqaQuery {
            question_id: &record.question_id,
            question: &record.question,
            images,
            crop: crop_rect,
        };
        let vqa = backends.vqa.as_ref().expect("checked before the run");
        let t1 = Instant::now();
        let answer = vqa.answer(&query)?;
        timing.answer_seconds = t1.elapsed().as_secs_f64();
        out.accuracy = Some(vqa_accuracy_with(&answer.answer, &record.answers, cfg.metric)?);
        out.model_answer = Some(answer.answer);
        Ok(())
    })();
    if let Err(e) = result {
        warn!("question {}: {e}", record.question_id);
        out.error = Some(e.to_string());
    }
    Stage {
        record: out,
        timing,
    }
}

fn read_progress(path: &Path) -> Result<Vec<ProgressLine>, HarnessError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        // A torn last line is what a kill leaves behind.
        if let Ok(p) = serde_json::from_str::<ProgressLine>(&line) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Rewrites `path` atomically with one JSON value per line.
pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let f = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = BufWriter::new(f);
        for item in items {
            serde_json::to_writer(&mut w, item)?;
            w.write_all(b"\n").map_err(io_err(&tmp))?;
        }
        w.flush().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn check_resume_config(dir: &Path, cfg: &RunConfig) -> Result<(), HarnessError> {
    let path = dir.join(CONFIG_FILE);
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let previous: RunConfig = serde_json::from_str(&text)?;
    if previous.fingerprint() != cfg.fingerprint() {
        return Err(HarnessError::Config(format!(
            "{} holds a different run; use a fresh output directory",
            dir.display()
        )));
    }
    Ok(())
}

/// Runs `cfg` against explicit backends (no endpoint resolution). A cache
/// configured in `cfg.cache_dir` is applied on top of `backends`.
pub fn run_with_backends(
    cfg: &RunConfig,
    records: Vec<VqaRecord>,
    backends: &BackendSet,
) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let strategy_backends = backends.strategy_backends();
    strategy_backends
        .check(cfg.strategy.kind)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    if backends.vqa.is_none() {
        return Err(HarnessError::Config("no VQA model configured".into()));
    }
    let records = select_records(records, &cfg.dataset);
    if records.is_empty() {
        return Err(HarnessError::Config("dataset has no records".into()));
    }
    let backends = match &cfg.cache_dir {
        Some(dir) => {
            let cache = ScoreCache::open(dir).map_err(io_err(dir))?;
            backends.with_cache(Arc::new(cache))
        }
        None => backends.clone(),
    };
    let strategy_backends = backends.strategy_backends();

    let mut done: HashMap<String, Stage> = HashMap::new();
    let mut progress: Option<Mutex<BufWriter<File>>> = None;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let progress_path = dir.join(PROGRESS_FILE);
        if cfg.resume {
            check_resume_config(dir, cfg)?;
            let wanted: HashSet<&str> = records.iter().map(|r| r.question_id.as_str()).collect();
            for p in read_progress(&progress_path)? {
                if p.record.error.is_none() && wanted.contains(p.record.question_id.as_str()) {
                    done.insert(
                        p.record.question_id.clone(),
                        Stage {
                            record: p.record,
                            timing: p.timing,
                        },
                    );
                }
            }
            if !done.is_empty() {
                info!("resuming: {} questions already done", done.len());
            }
        } else if progress_path.exists() {
            std::fs::remove_file(&progress_path).map_err(io_err(&progress_path))?;
        }
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(io_err(&cfg_path))?;
        // Rewrite the progress file with only the kept lines, dropping any
        // torn tail before appending.
        let kept: Vec<ProgressLine> = records
            .iter()
            .filter_map(|r| done.get(&r.question_id))
            .map(|s| ProgressLine {
                record: s.record.clone(),
                timing: s.timing.clone(),
            })
            .collect();
        write_jsonl(&progress_path, &kept)?;
        let f = OpenOptions::new()
            .append(true)
            .open(&progress_path)
            .map_err(io_err(&progress_path))?;
        progress = Some(Mutex::new(BufWriter::new(f)));
    }

    let pending: Vec<&VqaRecord> = records
        .iter()
        .filter(|r| !done.contains_key(&r.question_id))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let fresh: Vec<Result<Stage, HarnessError>> = pool.install(|| {
        pending
            .par_iter()
            .map(|r| {
                let stage = evaluate(r, cfg, &backends, &strategy_backends);
                if let Some(p) = &progress {
                    let line = serde_json::to_string(&ProgressLine {
                        record: stage.record.clone(),
                        timing: stage.timing.clone(),
                    })?;
                    let mut w = p.lock().unwrap();
                    let path = cfg.out_dir.as_deref().unwrap_or(Path::new(PROGRESS_FILE));
                    writeln!(w, "{line}").map_err(io_err(path))?;
                    w.flush().map_err(io_err(path))?;
                }
                Ok(stage)
            })
            .collect()
    });
    for stage in fresh {
        let stage = stage?;
        done.insert(stage.record.question_id.clone(), stage);
    }

    let mut out_records = Vec::with_capacity(records.len());
    let mut out_timings = Vec::with_capacity(records.len());
    for r in &records {
        let stage = done.remove(&r.question_id).expect("every record evaluated");
        out_records.push(stage.record);
        out_timings.push(stage.timing);
    }
    let aggregates = Aggregates::compute(&out_records, &out_timings)?;
    let report = RunReport {
        config: cfg.clone(),
        records: out_records,
        timings: out_timings,
        aggregates,
    };
    if let Some(dir) = &cfg.out_dir {
        write_jsonl(&dir.join(RECORDS_FILE), &report.records)?;
        write_jsonl(&dir.join(TIMINGS_FILE), &report.timings)?;
        let progress_path = dir.join(PROGRESS_FILE);
        drop(progress);
        std::fs::remove_file(&progress_path).map_err(io_err(&progress_path))?;
    }
    Ok(report)
}

/// Loads the dataset, resolves backends from the config and runs.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let records = read_records(&cfg.dataset.records)?;
    let backends = resolve_backends(cfg, &records)?;
    run_with_backends(cfg, records, &backends)
}
