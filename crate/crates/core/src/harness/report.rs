//! Aggregate tables and report files.
//!
//! Everything here is recomputed from per-question records (plus timings
//! for the latency table), so re-aggregating an emitted `records.jsonl`
//! reproduces the aggregate CSVs exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{io_err, write_jsonl, HarnessError, QuestionRecord, QuestionTiming, RunConfig};
use super::{CONFIG_FILE, RECORDS_FILE, TIMINGS_FILE};
use crate::datasets::{QuestionType, SizeGroup};
use crate::metrics::{accuracy_gain_by_type, mean, AccuracyResult};
use crate::strategies::StrategyKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub n: usize,
    pub accuracy: f64,
}

/// Aggregates for one (method, dataset) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: StrategyKind,
    pub dataset: String,
    pub n_total: usize,
    pub n_evaluated: usize,
    pub n_errored: usize,
    pub n_fallback: usize,
    pub accuracy: f64,
    pub by_size: BTreeMap<SizeGroup, GroupStat>,
    pub by_type: BTreeMap<QuestionType, GroupStat>,
    pub mean_crop_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Sorted by method, then dataset.
    pub cells: Vec<Cell>,
    pub n_errored: usize,
}

fn stat<'a>(records: impl Iterator<Item = &'a QuestionRecord>) -> Option<GroupStat> {
    let mut accs: Vec<(&str, f64)> = records
        .filter_map(|r| r.accuracy.map(|a| (r.question_id.as_str(), a)))
        .collect();
    if accs.is_empty() {
        return None;
    }
    // Summation in id order keeps the mean independent of record order.
    accs.sort_by(|a, b| a.0.cmp(b.0));
    Some(GroupStat {
        n: accs.len(),
        accuracy: mean(accs.iter().map(|a| a.1)),
    })
}

impl Aggregates {
    pub fn compute(
        records: &[QuestionRecord],
        timings: &[QuestionTiming],
    ) -> Result<Aggregates, HarnessError> {
        if records.is_empty() {
            return Err(HarnessError::EmptyReport("no per-question records".into()));
        }
        let mut groups: BTreeMap<(StrategyKind, &str), Vec<&QuestionRecord>> = BTreeMap::new();
        for r in records {
            groups.entry((r.method, &r.dataset)).or_default().push(r);
        }
        let mut cells = Vec::with_capacity(groups.len());
        for ((method, dataset), rs) in groups {
            let ids: BTreeSet<&str> = rs.iter().map(|r| r.question_id.as_str()).collect();
            let mut crop: Vec<(&str, f64)> = timings
                .iter()
                .filter(|t| t.method == method && ids.contains(t.question_id.as_str()))
                .map(|t| (t.question_id.as_str(), t.crop_seconds))
                .collect();
            crop.sort_by(|a, b| a.0.cmp(b.0));
            let overall = stat(rs.iter().copied());
            let by_size = SizeGroup::ALL
                .iter()
                .filter_map(|g| {
                    stat(rs.iter().copied().filter(|r| r.size_group == Some(*g))).map(|s| (*g, s))
                })
                .collect();
            let by_type = QuestionType::ALL
                .iter()
                .filter_map(|t| {
                    stat(rs.iter().copied().filter(|r| r.question_type == *t)).map(|s| (*t, s))
                })
                .collect();
            let n_errored = rs.iter().filter(|r| r.error.is_some()).count();
            cells.push(Cell {
                method,
                dataset: dataset.to_string(),
                n_total: rs.len(),
                n_evaluated: overall.map_or(0, |s| s.n),
                n_errored,
                n_fallback: rs.iter().filter(|r| r.crop_fallback).count(),
                accuracy: overall.map_or(0.0, |s| s.accuracy),
                by_size,
                by_type,
                mean_crop_seconds: (!crop.is_empty()).then(|| mean(crop.iter().map(|c| c.1))),
            });
        }
        Ok(Aggregates {
            n_errored: cells.iter().map(|c| c.n_errored).sum(),
            cells,
        })
    }

    pub fn cell(&self, method: StrategyKind, dataset: &str) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.dataset == dataset)
    }

    fn datasets(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.cells.iter().map(|c| c.dataset.as_str()).collect();
        set.into_iter().collect()
    }

    fn methods(&self) -> Vec<StrategyKind> {
        let set: BTreeSet<StrategyKind> = self.cells.iter().map(|c| c.method).collect();
        set.into_iter().collect()
    }
}

/// Per-question results, possibly spanning several runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunData {
    pub records: Vec<QuestionRecord>,
    pub timings: Vec<QuestionTiming>,
}

impl RunData {
    pub fn extend(&mut self, other: RunData) {
        self.records.extend(other.records);
        self.timings.extend(other.timings);
    }

    pub fn aggregates(&self) -> Result<Aggregates, HarnessError> {
        Aggregates::compute(&self.records, &self.timings)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Accuracy per method (rows) and dataset (columns), in percent.
pub fn main_table(agg: &Aggregates) -> Table {
    let datasets = agg.datasets();
    let mut header = vec!["method".to_string()];
    header.extend(datasets.iter().map(|d| d.to_string()));
    let rows = agg
        .methods()
        .into_iter()
        .map(|m| {
            let mut row = vec![m.to_string()];
            row.extend(
                datasets
                    .iter()
                    .map(|d| agg.cell(m, d).map_or(String::new(), |c| pct(c.accuracy))),
            );
            row
        })
        .collect();
    Table {
        name: "main_results",
        header,
        rows,
    }
}

/// Accuracy per answer-box size group, in percent.
pub fn size_table(agg: &Aggregates) -> Table {
    let mut header = vec!["method".to_string(), "dataset".to_string()];
    for g in SizeGroup::ALL {
        header.push(format!("{g} ({})", g.label()));
        header.push(format!("{g} n"));
    }
    let rows = agg
        .cells
        .iter()
        .filter(|c| !c.by_size.is_empty())
        .map(|c| {
            let mut row = vec![c.method.to_string(), c.dataset.clone()];
            for g in SizeGroup::ALL {
                match c.by_size.get(&g) {
                    Some(s) => {
                        row.push(pct(s.accuracy));
                        row.push(s.n.to_string());
                    }
                    None => {
                        row.push(String::new());
                        row.push("0".into());
                    }
                }
            }
            row
        })
        .collect();
    Table {
        name: "size_groups",
        header,
        rows,
    }
}

fn evaluated<'a>(rs: &[&'a QuestionRecord]) -> BTreeSet<&'a str> {
    rs.iter()
        .filter(|r| r.accuracy.is_some())
        .map(|r| r.question_id.as_str())
        .collect()
}

fn accuracy_result(records: &[&QuestionRecord], keep: &BTreeSet<&str>) -> AccuracyResult {
    AccuracyResult::from_scores(
        records
            .iter()
            .filter(|r| keep.contains(r.question_id.as_str()))
            .filter_map(|r| r.accuracy.map(|a| (r.question_id.clone(), a))),
        0,
    )
}

/// Per question type, the accuracy gain (percentage points) of each method
/// over the `none` run on the same dataset. Only questions evaluated by both
/// runs count.
pub fn type_gain_table(records: &[QuestionRecord]) -> Result<Table, HarnessError> {
    let mut by_cell: BTreeMap<(&str, StrategyKind), Vec<&QuestionRecord>> = BTreeMap::new();
    for r in records {
        by_cell.entry((&r.dataset, r.method)).or_default().push(r);
    }
    let mut header = vec!["question_type".to_string()];
    let mut columns: Vec<BTreeMap<QuestionType, f64>> = Vec::new();
    let types: BTreeMap<&str, QuestionType> = records
        .iter()
        .map(|r| (r.question_id.as_str(), r.question_type))
        .collect();
    for ((dataset, method), treated) in &by_cell {
        if *method == StrategyKind::None {
            continue;
        }
        let Some(base) = by_cell.get(&(*dataset, StrategyKind::None)) else {
            continue;
        };
        let b_ids = evaluated(base);
        let t_ids = evaluated(treated);
        let common: BTreeSet<&str> = b_ids.intersection(&t_ids).copied().collect();
        let gains = accuracy_gain_by_type(
            &accuracy_result(base, &common),
            &accuracy_result(treated, &common),
            |id| types.get(id).copied().unwrap_or(QuestionType::Other),
        )?;
        header.push(format!("{method} ({dataset})"));
        columns.push(gains);
    }
    let rows = QuestionType::ALL
        .iter()
        .map(|t| {
            let mut row = vec![t.to_string()];
            row.extend(
                columns
                    .iter()
                    .map(|c| c.get(t).map_or(String::new(), |g| pct(*g))),
            );
            row
        })
        .collect();
    Ok(Table {
        name: "question_type_gain",
        header,
        rows,
    })
}

/// Mean crop-stage seconds per method and dataset.
pub fn latency_table(agg: &Aggregates) -> Table {
    let rows = agg
        .cells
        .iter()
        .filter_map(|c| {
            c.mean_crop_seconds
                .map(|s| vec![c.method.to_string(), c.dataset.clone(), format!("{s:.4}")])
        })
        .collect();
    Table {
        name: "crop_latency",
        header: vec!["method".into(), "dataset".into(), "mean_crop_seconds".into()],
        rows,
    }
}

/// Question counts, including errored questions excluded from accuracy.
pub fn counts_table(agg: &Aggregates) -> Table {
    let rows = agg
        .cells
        .iter()
        .map(|c| {
            vec![
                c.method.to_string(),
                c.dataset.clone(),
                c.n_total.to_string(),
                c.n_evaluated.to_string(),
                c.n_errored.to_string(),
                c.n_fallback.to_string(),
            ]
        })
        .collect();
    Table {
        name: "counts",
        header: ["method", "dataset", "total", "evaluated", "errored", "fallback"]
            .map(String::from)
            .to_vec(),
        rows,
    }
}

/// All aggregate tables for `data`.
pub fn tables(data: &RunData) -> Result<Vec<Table>, HarnessError> {
    let agg = data.aggregates()?;
    Ok(vec![
        main_table(&agg),
        size_table(&agg),
        type_gain_table(&data.records)?,
        latency_table(&agg),
        counts_table(&agg),
    ])
}

pub fn table_to_csv(table: &Table) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| HarnessError::Config(format!("csv: {e}"));
    w.write_record(&table.header).map_err(csv_err)?;
    for row in &table.rows {
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| HarnessError::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn table_to_markdown(table: &Table) -> String {
    let mut out = String::new();
    let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
    out.push_str(&line(&table.header));
    out.push_str(&line(&vec!["---".to_string(); table.header.len()]));
    for row in &table.rows {
        out.push_str(&line(row));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

fn config_header(configs: &[RunConfig]) -> Result<String, HarnessError> {
    let mut out = String::new();
    for cfg in configs {
        let s = &cfg.strategy;
        let _ = writeln!(
            out,
            "- {} on {}: metric {}, feed {:?}, ratio {}, iterations {}, detector conf {}, \
             windows {:?} stride {}, patch threshold {}, subset {:?} seed {}",
            s.kind,
            cfg.dataset.name,
            cfg.metric,
            s.feed_mode,
            s.ratio,
            s.iterations,
            s.detector_conf,
            s.window_fractions,
            s.window_stride_fraction,
            s.patch_threshold,
            cfg.dataset.subset,
            cfg.dataset.seed,
        );
    }
    Ok(out)
}

/// Writes the per-question files, every table as CSV and/or one Markdown
/// document, and `report.json` with the aggregates and resolved configs.
/// Returns the written paths.
pub fn emit_report(
    data: &RunData,
    configs: &[RunConfig],
    dir: &Path,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>, HarnessError> {
    let agg = data.aggregates()?;
    let tables = tables(data)?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let records = dir.join(RECORDS_FILE);
    write_jsonl(&records, &data.records)?;
    written.push(records);
    if !data.timings.is_empty() {
        let timings = dir.join(TIMINGS_FILE);
        write_jsonl(&timings, &data.timings)?;
        written.push(timings);
    }
    if formats.contains(&ReportFormat::Csv) {
        for t in &tables {
            let path = dir.join(format!("{}.csv", t.name));
            std::fs::write(&path, table_to_csv(t)?).map_err(io_err(&path))?;
            written.push(path);
        }
    }
    if formats.contains(&ReportFormat::Markdown) {
        let mut md = String::from("# Report\n\n");
        if !configs.is_empty() {
            md.push_str("## Configuration\n\n");
            md.push_str(&config_header(configs)?);
            md.push('\n');
        }
        for t in &tables {
            let _ = writeln!(md, "## {}\n", t.name);
            md.push_str(&table_to_markdown(t));
            md.push('\n');
        }
        let path = dir.join("report.md");
        std::fs::write(&path, md).map_err(io_err(&path))?;
        written.push(path);
    }
    let path = dir.join("report.json");
    let json = serde_json::json!({ "configs": configs, "aggregates": agg });
    std::fs::write(&path, serde_json::to_string_pretty(&json)?).map_err(io_err(&path))?;
    written.push(path);
    Ok(written)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Loads a run from its output directory or its `records.jsonl`. Timings
/// and config are picked up from sibling files when present.
pub fn load_run(path: &Path) -> Result<(RunData, Option<RunConfig>), HarnessError> {
    let (dir, records_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(RECORDS_FILE))
    } else {
        (
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
            path.to_path_buf(),
        )
    };
    let records = read_jsonl(&records_path)?;
    let timings_path = dir.join(TIMINGS_FILE);
    let timings = if timings_path.exists() && timings_path != records_path {
        read_jsonl(&timings_path)?
    } else {
        Vec::new()
    };
    let cfg_path = dir.join(CONFIG_FILE);
    let config = if cfg_path.exists() {
        let text = std::fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };
    Ok((RunData { records, timings }, config))
}
