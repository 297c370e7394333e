use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use cropvqa::backends::synthetic::{ScriptedEntry, ScriptedVqaModel};
use cropvqa::backends::{
    BackendError, BackendIdentity, Identified, VqaAnswer, VqaModel, VqaQuery,
};
use cropvqa::datasets::{read_records, write_records, VqaRecord, RECORD_SCHEMA_VERSION};
use cropvqa::fixtures::{synthetic_backends, write_fixture, SyntheticSpec};
use cropvqa::geometry::Image;
use cropvqa::harness::report::{load_run, table_to_csv, tables};
use cropvqa::harness::{
    emit_report, run_experiment, run_with_backends, BackendSet, DatasetSpec, HarnessError,
    ReportFormat, RunConfig, CONFIG_FILE, PROGRESS_FILE, RECORDS_FILE,
};
use cropvqa::strategies::{StrategyConfig, StrategyKind};

fn fixture(dir: &Path, n: usize) -> PathBuf {
    write_fixture(
        dir,
        &SyntheticSpec {
            n,
            seed: 7,
            ..SyntheticSpec::default()
        },
    )
    .unwrap()
}

fn config(records: &Path, kind: StrategyKind) -> RunConfig {
    RunConfig::new(
        DatasetSpec {
            records: records.to_path_buf(),
            name: "syn".into(),
            subset: None,
            seed: 0,
        },
        StrategyConfig::with_kind(kind),
    )
}

struct CountingVqa {
    inner: Arc<dyn VqaModel>,
    calls: AtomicUsize,
}

impl Identified for CountingVqa {
    fn identity(&self) -> BackendIdentity {
        self.inner.identity()
    }
}

impl VqaModel for CountingVqa {
    fn answer(&self, q: &VqaQuery<'_>) -> Result<VqaAnswer, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.answer(q)
    }
}

#[test]
fn identical_configs_give_byte_identical_records() {
    let data = tempfile::tempdir().unwrap();
    let records = fixture(data.path(), 12);
    let mut outs = Vec::new();
    for i in 0..2 {
        let mut cfg = config(&records, StrategyKind::Iterative);
        cfg.out_dir = Some(data.path().join(format!("out{i}")));
        run_experiment(&cfg).unwrap();
        outs.push(std::fs::read(data.path().join(format!("out{i}")).join(RECORDS_FILE)).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    assert!(!outs[0].is_empty());
}

#[test]
fn parallel_and_serial_runs_agree() {
    let data = tempfile::tempdir().unwrap();
    let records = fixture(data.path(), 16);
    for kind in [StrategyKind::SlidingWindow, StrategyKind::Patchmap] {
        let mut serial = config(&records, kind);
        serial.jobs = 1;
        let mut parallel = serial.clone();
        parallel.jobs = 8;
        let a = run_experiment(&serial).unwrap();
        let b = run_experiment(&parallel).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.aggregates.cells[0].accuracy, b.aggregates.cells[0].accuracy);
    }
}

#[test]
fn warm_cache_equals_cold_cache() {
    let data = tempfile::tempdir().unwrap();
    let records = fixture(data.path(), 10);
    let mut cfg = config(&records, StrategyKind::Iterative);
    cfg.cache_dir = Some(data.path().join("cache"));
    cfg.jobs = 4;
    let cold = run_experiment(&cfg).unwrap();
    let cache_file = data.path().join("cache").join("responses.jsonl");
    let lines_after_cold = std::fs::read_to_string(&cache_file).unwrap().lines().count();
    assert!(lines_after_cold > 0);
    let warm = run_experiment(&cfg).unwrap();
    assert_eq!(cold.records, warm.records);
    let uncached = run_experiment(&config(&records, StrategyKind::Iterative)).unwrap();
    assert_eq!(uncached.records, warm.records);
    // Nothing new was computed on the warm run.
    let lines_after_warm = std::fs::read_to_string(&cache_file).unwrap().lines().count();
    assert_eq!(lines_after_cold, lines_after_warm);
}

#[test]
fn resume_after_kill_matches_uninterrupted_run() {
    let data = tempfile::tempdir().unwrap();
    let records_path = fixture(data.path(), 10);
    let records = read_records(&records_path).unwrap();

    let mut full = config(&records_path, StrategyKind::Iterative);
    full.out_dir = Some(data.path().join("full"));
    let reference = run_experiment(&full).unwrap();

    // A killed run leaves run.json and a partial progress file with a torn tail.
    let out = data.path().join("killed");
    std::fs::create_dir_all(&out).unwrap();
    let mut cfg = full.clone();
    cfg.out_dir = Some(out.clone());
    std::fs::write(out.join(CONFIG_FILE), serde_json::to_string(&cfg).unwrap()).unwrap();
    let mut progress = String::new();
    for (r, t) in reference.records.iter().zip(&reference.timings).take(4) {
        progress.push_str(&serde_json::json!({ "record": r, "timing": t }).to_string());
        progress.push('\n');
    }
    progress.push_str("{\"record\":{\"question_id\":\"syn000");
    std::fs::write(out.join(PROGRESS_FILE), progress).unwrap();

    let base = synthetic_backends(&records);
    let counting = Arc::new(CountingVqa {
        inner: base.vqa.clone().unwrap(),
        calls: AtomicUsize::new(0),
    });
    let backends = BackendSet {
        vqa: Some(counting.clone()),
        ..base
    };
    let resumed = run_with_backends(&cfg, records, &backends).unwrap();
    assert_eq!(counting.calls.load(Ordering::SeqCst), 6);
    assert_eq!(resumed.records, reference.records);
    assert_eq!(
        std::fs::read(out.join(RECORDS_FILE)).unwrap(),
        std::fs::read(data.path().join("full").join(RECORDS_FILE)).unwrap()
    );
    assert!(!out.join(PROGRESS_FILE).exists());
}

#[test]
fn resume_refuses_a_different_config() {
    let data = tempfile::tempdir().unwrap();
    let records = fixture(data.path(), 3);
    let mut a = config(&records, StrategyKind::Iterative);
    a.out_dir = Some(data.path().join("out"));
    run_experiment(&a).unwrap();
    let mut b = a.clone();
    b.strategy.ratio = 0.8;
    assert!(matches!(run_experiment(&b), Err(HarnessError::Config(_))));
    b.resume = false;
    run_experiment(&b).unwrap();
}

const HAND_ANSWERS: [&str; 10] = ["two", "two", "red", "yes", "cat", "A Dog", "stop!", "left", "3", "bus"];

fn hand_fixture(dir: &Path) -> (PathBuf, Vec<VqaRecord>) {
    // (model answer, annotations): accuracy is min(0.3 * matches, 1).
    let cases: [(&str, &[&str]); 10] = [
        ("two", &["two"; 10]),
        ("two", &["two", "two", "two", "3", "3", "3", "3", "3", "3", "3"]),
        ("red", &["red", "red", "blue", "blue", "blue", "blue", "blue", "blue", "blue", "blue"]),
        ("yes", &["yes", "no", "no", "no", "no", "no", "no", "no", "no", "no"]),
        ("cat", &["dog"; 10]),
        ("A Dog", &["dog", "dog", "dog", "dog", "cat", "cat", "cat", "cat", "cat", "cat"]),
        ("stop!", &["stop", "stop", "go", "go", "go", "go", "go", "go", "go", "go"]),
        ("left", &["left", "left", "left", "left", "left", "right", "right", "right", "right", "right"]),
        ("3", &["three", "three", "three", "three", "three", "three", "three", "three", "three", "three"]),
        ("bus", &["bus", "bus", "bus", "car", "car", "car", "car", "car", "car", "car"]),
    ];
    std::fs::create_dir_all(dir.join("img")).unwrap();
    let img = Image::filled(8, 6, [10, 20, 30]).unwrap();
    img.save_png(&dir.join("img/a.png")).unwrap();
    let mut records = Vec::new();
    for (i, (answer, annotations)) in cases.iter().enumerate() {
        assert_eq!(*answer, HAND_ANSWERS[i]);
        let id = format!("h{i:02}");
        records.push(VqaRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            question_id: id,
            image_ref: PathBuf::from("img/a.png"),
            question: format!("question {i}?"),
            answers: annotations.iter().map(|s| s.to_string()).collect(),
            image_width: Some(8),
            image_height: Some(6),
            gt_box: None,
            ocr_tokens: None,
        });
    }
    let path = dir.join("records.jsonl");
    write_records(&path, &records).unwrap();
    (path, read_records(&dir.join("records.jsonl")).unwrap())
}

fn hand_model(records: &[VqaRecord]) -> ScriptedVqaModel {
    records
        .iter()
        .zip(HAND_ANSWERS)
        .fold(ScriptedVqaModel::new("unknown"), |m, (r, a)| {
            m.with_id(
                r.question_id.clone(),
                ScriptedEntry {
                    answer: a.into(),
                    planted: None,
                },
            )
        })
}

#[test]
fn no_crop_accuracy_matches_hand_scoring() {
    let data = tempfile::tempdir().unwrap();
    let (path, records) = hand_fixture(data.path());
    // Matches per case: 10, 3, 2, 1, 0, 4 ("a dog" -> "dog"), 2, 5, 0, 3.
    let hand = [1.0, 0.9, 0.6, 0.3, 0.0, 1.0, 0.6, 1.0, 0.0, 0.9];
    let backends = BackendSet {
        vqa: Some(Arc::new(hand_model(&records))),
        ..BackendSet::default()
    };
    let report = run_with_backends(&config(&path, StrategyKind::None), records, &backends).unwrap();
    for (rec, want) in report.records.iter().zip(hand) {
        assert_eq!(rec.accuracy, Some(want), "{}", rec.question_id);
    }
    let mean = report.aggregates.cells[0].accuracy;
    assert!((mean - 0.63).abs() < 1e-12, "{mean}");
}

#[test]
fn cropping_beats_no_crop_on_planted_fixture() {
    let data = tempfile::tempdir().unwrap();
    let records = fixture(data.path(), 20);
    let none = run_experiment(&config(&records, StrategyKind::None)).unwrap();
    for kind in [
        StrategyKind::Human,
        StrategyKind::Iterative,
        StrategyKind::Detector,
        StrategyKind::Segmenter,
        StrategyKind::Patchmap,
    ] {
        let cropped = run_experiment(&config(&records, kind)).unwrap();
        assert!(
            cropped.aggregates.cells[0].accuracy > none.aggregates.cells[0].accuracy,
            "{kind}"
        );
    }
}

#[test]
fn missing_images_are_counted_as_errors() {
    let data = tempfile::tempdir().unwrap();
    let path = fixture(data.path(), 5);
    std::fs::remove_file(data.path().join("images/syn00002.png")).unwrap();
    let report = run_experiment(&config(&path, StrategyKind::Human)).unwrap();
    assert_eq!(report.n_errored(), 1);
    let cell = &report.aggregates.cells[0];
    assert_eq!((cell.n_total, cell.n_evaluated, cell.n_errored), (5, 4, 1));
    let bad = &report.records[2];
    assert!(bad.error.is_some() && bad.accuracy.is_none());
}

#[test]
fn config_errors_abort_before_work() {
    let data = tempfile::tempdir().unwrap();
    let path = fixture(data.path(), 2);
    let mut cfg = config(&path, StrategyKind::Iterative);
    cfg.jobs = 0;
    assert!(matches!(run_experiment(&cfg), Err(HarnessError::Config(_))));
    let records = read_records(&path).unwrap();
    let no_detector = BackendSet {
        detector: None,
        ..synthetic_backends(&records)
    };
    let err = run_with_backends(&config(&path, StrategyKind::Detector), records, &no_detector);
    assert!(matches!(err, Err(HarnessError::Config(_))));
}

#[test]
fn subsets_are_seeded_and_keep_dataset_order() {
    let data = tempfile::tempdir().unwrap();
    let path = fixture(data.path(), 20);
    let mut cfg = config(&path, StrategyKind::None);
    cfg.dataset.subset = Some(7);
    cfg.dataset.seed = 3;
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    let ids: Vec<&str> = a.records.iter().map(|r| r.question_id.as_str()).collect();
    assert_eq!(ids.len(), 7);
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(a.records, b.records);
    cfg.dataset.seed = 4;
    let c = run_experiment(&cfg).unwrap();
    assert_ne!(a.records, c.records);
    assert_eq!(a.config.dataset.seed, 3);
}

#[test]
fn emitted_records_reaggregate_to_identical_tables() {
    let data = tempfile::tempdir().unwrap();
    let path = fixture(data.path(), 12);
    let mut combined = cropvqa::harness::RunData::default();
    let mut configs = Vec::new();
    for kind in [StrategyKind::None, StrategyKind::Human, StrategyKind::Iterative] {
        let cfg = config(&path, kind);
        let report = run_experiment(&cfg).unwrap();
        combined.extend(report.data());
        configs.push(cfg);
    }
    let out = data.path().join("report");
    let written = emit_report(
        &combined,
        &configs,
        &out,
        &[ReportFormat::Csv, ReportFormat::Markdown],
    )
    .unwrap();
    assert!(written.iter().any(|p| p.ends_with("main_results.csv")));
    let md = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(md.contains("| method | syn |"));
    assert!(md.contains("windows [0.5, 0.65, 0.8] stride 0.5"));

    let (reloaded, _) = load_run(&out.join(RECORDS_FILE)).unwrap();
    assert_eq!(reloaded.records, combined.records);
    // Records alone (no timings) reproduce every accuracy table.
    let records_only = cropvqa::harness::RunData {
        records: reloaded.records,
        timings: Vec::new(),
    };
    let original_only = cropvqa::harness::RunData {
        records: combined.records.clone(),
        timings: Vec::new(),
    };
    let a = tables(&records_only).unwrap();
    let b = tables(&original_only).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(table_to_csv(x).unwrap(), table_to_csv(y).unwrap());
    }
    // With timings the emitted CSVs reproduce byte for byte.
    let (with_timings, _) = load_run(&out).unwrap();
    for t in tables(&with_timings).unwrap() {
        let on_disk = std::fs::read_to_string(out.join(format!("{}.csv", t.name))).unwrap();
        assert_eq!(table_to_csv(&t).unwrap(), on_disk, "{}", t.name);
    }
}
