//! Dataset ingestion into normalized [`VqaRecord`]s, OCR-based answer boxes,
//! size groups and question types.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::geometry::{rel_size_in, round_half_up, Rect};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("no annotation for question {0}")]
    MissingAnnotation(String),
    #[error("invalid record {id}: {msg}")]
    InvalidRecord { id: String, msg: String },
    #[error("unsupported record schema version {0}")]
    SchemaVersion(u32),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, msg: impl fmt::Display) -> DatasetError {
    DatasetError::Parse {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrToken {
    pub text: String,
    #[serde(rename = "box")]
    pub rect: Rect,
}

fn schema_version() -> u32 {
    RECORD_SCHEMA_VERSION
}

/// One question-image pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaRecord {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub question_id: String,
    pub image_ref: PathBuf,
    pub question: String,
    /// Annotator answers in annotator order (up to 10).
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<Rect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_tokens: Option<Vec<OcrToken>>,
}

impl VqaRecord {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |msg: &str| DatasetError::InvalidRecord {
            id: self.question_id.clone(),
            msg: msg.to_string(),
        };
        if self.schema_version != RECORD_SCHEMA_VERSION {
            return Err(DatasetError::SchemaVersion(self.schema_version));
        }
        if self.question.trim().is_empty() {
            return Err(bad("empty question"));
        }
        if self.answers.len() > 10 {
            return Err(bad("more than 10 answers"));
        }
        if let (Some(w), Some(h)) = (self.image_width, self.image_height) {
            let boxes = self
                .gt_box
                .iter()
                .chain(self.ocr_tokens.iter().flatten().map(|t| &t.rect));
            for b in boxes {
                if !b.fits_within(w, h) {
                    return Err(bad(&format!("box {b} outside {w}x{h} image")));
                }
            }
        }
        Ok(())
    }

    pub fn image_size(&self) -> Option<(u32, u32)> {
        self.image_width.zip(self.image_height)
    }

    /// The most frequent answer (case- and whitespace-insensitive); ties go
    /// to the answer seen first.
    pub fn majority_answer(&self) -> Option<&str> {
        let mut counts: Vec<(String, usize, &str)> = Vec::new();
        for a in &self.answers {
            let key = a.trim().to_lowercase();
            match counts.iter_mut().find(|(k, _, _)| *k == key) {
                Some(entry) => entry.1 += 1,
                None => counts.push((key, 1, a.as_str())),
            }
        }
        let mut best: Option<&(String, usize, &str)> = None;
        for c in &counts {
            if best.is_none_or(|b| c.1 > b.1) {
                best = Some(c);
            }
        }
        best.map(|b| b.2)
    }
}

/// Records plus the questions dropped because their image was missing.
#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub records: Vec<VqaRecord>,
    pub skipped_missing_image: usize,
}

fn read_json(path: &Path) -> Result<Value, DatasetError> {
    let f = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| parse_err(path, e))
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn keep_if_present(image_dir: Option<&Path>, image_ref: &Path, skipped: &mut usize) -> bool {
    match image_dir {
        Some(_) if !image_ref.exists() => {
            *skipped += 1;
            false
        }
        _ => true,
    }
}

/// Reads the official VQAv2 question and annotation files.
///
/// Image paths follow the COCO naming `COCO_<split>_<id:012>.jpg`, with the
/// split taken from the question file's `data_subtype` (default `val2014`).
/// When `image_dir` is `None` existence is not checked.
pub fn ingest_vqav2(
    questions_file: &Path,
    annotations_file: &Path,
    image_dir: Option<&Path>,
) -> Result<Ingested, DatasetError> {
    let questions = read_json(questions_file)?;
    let annotations = read_json(annotations_file)?;
    let subtype = questions
        .get("data_subtype")
        .and_then(Value::as_str)
        .unwrap_or("val2014")
        .to_string();
    let ann_list = annotations
        .get("annotations")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(annotations_file, "missing `annotations` array"))?;
    let mut answers_by_id: HashMap<String, Vec<String>> = HashMap::with_capacity(ann_list.len());
    for a in ann_list {
        let id = a
            .get("question_id")
            .and_then(id_string)
            .ok_or_else(|| parse_err(annotations_file, "annotation without question_id"))?;
        let answers = a
            .get("answers")
            .and_then(Value::as_array)
            .ok_or_else(|| parse_err(annotations_file, format!("annotation {id} has no answers")))?
            .iter()
            .filter_map(|x| x.get("answer").and_then(Value::as_str).map(str::to_owned))
            .collect();
        answers_by_id.insert(id, answers);
    }
    let q_list = questions
        .get("questions")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(questions_file, "missing `questions` array"))?;
    let mut out = Ingested::default();
    for q in q_list {
        let id = q
            .get("question_id")
            .and_then(id_string)
            .ok_or_else(|| parse_err(questions_file, "question without question_id"))?;
        let image_id = q
            .get("image_id")
            .and_then(Value::as_u64)
            .ok_or_else(|| parse_err(questions_file, format!("question {id} has no image_id")))?;
        let question = q
            .get("question")
            .and_then(Value::as_str)
            .ok_or_else(|| parse_err(questions_file, format!("question {id} has no text")))?;
        let answers = answers_by_id
            .remove(&id)
            .ok_or_else(|| DatasetError::MissingAnnotation(id.clone()))?;
        let file_name = format!("COCO_{subtype}_{image_id:012}.jpg");
        let image_ref = image_dir.map_or_else(|| PathBuf::from(&file_name), |d| d.join(&file_name));
        if !keep_if_present(image_dir, &image_ref, &mut out.skipped_missing_image) {
            continue;
        }
        out.records.push(VqaRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            question_id: id,
            image_ref,
            question: question.to_string(),
            answers,
            image_width: None,
            image_height: None,
            gt_box: None,
            ocr_tokens: None,
        });
    }
    Ok(out)
}

/// Converts a normalized (0..1) OCR box to pixels, clamped and at least 1px.
fn normalized_box_to_rect(bb: &Value, width: u32, height: u32) -> Option<Rect> {
    let f = |k: &str| bb.get(k).and_then(Value::as_f64);
    let (x, y, w, h) = (
        f("top_left_x")?,
        f("top_left_y")?,
        f("width")?,
        f("height")?,
    );
    let to_px = |v: f64, extent: u32| round_half_up(v * f64::from(extent)).clamp(0, i64::from(extent)) as u32;
    let (mut x0, mut x1) = (to_px(x, width), to_px(x + w, width));
    let (mut y0, mut y1) = (to_px(y, height), to_px(y + h, height));
    if x1 <= x0 {
        (x0, x1) = if x0 < width { (x0, x0 + 1) } else { (width - 1, width) };
    }
    if y1 <= y0 {
        (y0, y1) = if y0 < height { (y0, y0 + 1) } else { (height - 1, height) };
    }
    Rect::new(x0, y0, x1, y1).ok()
}

/// Reads TextVQA questions (`{"data": [...]}`) and attaches the Rosetta OCR
/// tokens of each image. OCR boxes arrive normalized to the image size and
/// are converted to pixels. Images without an OCR entry get no tokens.
pub fn ingest_textvqa(
    questions_file: &Path,
    ocr_file: Option<&Path>,
    image_dir: Option<&Path>,
) -> Result<Ingested, DatasetError> {
    let questions = read_json(questions_file)?;
    let mut ocr_by_image: HashMap<String, Vec<Value>> = HashMap::new();
    if let Some(path) = ocr_file {
        let ocr = read_json(path)?;
        let entries = ocr
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| parse_err(path, "missing `data` array"))?;
        for e in entries {
            let id = e
                .get("image_id")
                .and_then(id_string)
                .ok_or_else(|| parse_err(path, "OCR entry without image_id"))?;
            let info = e
                .get("ocr_info")
                .and_then(Value::as_array)
                .cloned()
                .unwrap_or_default();
            ocr_by_image.insert(id, info);
        }
    }
    let data = questions
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(questions_file, "missing `data` array"))?;
    let mut out = Ingested::default();
    for q in data {
        let id = q
            .get("question_id")
            .and_then(id_string)
            .ok_or_else(|| parse_err(questions_file, "question without question_id"))?;
        let image_id = q
            .get("image_id")
            .and_then(id_string)
            .ok_or_else(|| parse_err(questions_file, format!("question {id} has no image_id")))?;
        let question = q
            .get("question")
            .and_then(Value::as_str)
            .ok_or_else(|| parse_err(questions_file, format!("question {id} has no text")))?;
        let answers = q
            .get("answers")
            .and_then(Value::as_array)
            .ok_or_else(|| DatasetError::MissingAnnotation(id.clone()))?
            .iter()
            .filter_map(|a| a.as_str().map(str::to_owned))
            .collect();
        let dim = |k: &str| q.get(k).and_then(Value::as_u64).and_then(|v| u32::try_from(v).ok());
        let (width, height) = (dim("image_width"), dim("image_height"));
        let file_name = format!("{image_id}.jpg");
        let image_ref = image_dir.map_or_else(|| PathBuf::from(&file_name), |d| d.join(&file_name));
        if !keep_if_present(image_dir, &image_ref, &mut out.skipped_missing_image) {
            continue;
        }
        let ocr_tokens = ocr_file.map(|_| match (width, height) {
            (Some(w), Some(h)) if w > 0 && h > 0 => ocr_by_image
                .get(&image_id)
                .map(|tokens| {
                    tokens
                        .iter()
                        .filter_map(|t| {
                            Some(OcrToken {
                                text: t.get("word")?.as_str()?.to_string(),
                                rect: normalized_box_to_rect(t.get("bounding_box")?, w, h)?,
                            })
                        })
                        .collect()
                })
                .unwrap_or_default(),
            _ => Vec::new(),
        });
        out.records.push(VqaRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            question_id: id,
            image_ref,
            question: question.to_string(),
            answers,
            image_width: width,
            image_height: height,
            gt_box: None,
            ocr_tokens,
        });
    }
    Ok(out)
}

/// String similarity measures for OCR matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMeasure {
    /// `1 - levenshtein / max(len)`.
    #[default]
    Levenshtein,
    JaroWinkler,
}

impl FromStr for SimilarityMeasure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "levenshtein" => Ok(SimilarityMeasure::Levenshtein),
            "jaro-winkler" => Ok(SimilarityMeasure::JaroWinkler),
            other => Err(format!("unknown similarity measure `{other}`")),
        }
    }
}

/// Case-insensitive, trimmed normalized Levenshtein similarity in `[0, 1]`.
pub fn string_similarity(a: &str, b: &str) -> f64 {
    similarity_with(a, b, SimilarityMeasure::Levenshtein)
}

pub fn similarity_with(a: &str, b: &str, measure: SimilarityMeasure) -> f64 {
    let (a, b) = (a.trim().to_lowercase(), b.trim().to_lowercase());
    match measure {
        SimilarityMeasure::Levenshtein => strsim::normalized_levenshtein(&a, &b),
        SimilarityMeasure::JaroWinkler => strsim::jaro_winkler(&a, &b),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedBox {
    pub rect: Rect,
    pub similarity: f64,
}

/// The OCR box whose text best matches the record's majority answer.
///
/// Ties on similarity go to the larger box, then to reading order
/// (top-to-bottom, left-to-right).
pub fn derive_answer_bbox(record: &VqaRecord, measure: SimilarityMeasure) -> Option<DerivedBox> {
    let answer = record.majority_answer()?;
    let tokens = record.ocr_tokens.as_ref()?;
    let mut best: Option<DerivedBox> = None;
    for t in tokens {
        let cand = DerivedBox {
            rect: t.rect,
            similarity: similarity_with(&t.text, answer, measure),
        };
        let better = match &best {
            None => true,
            Some(b) => {
                cand.similarity > b.similarity
                    || (cand.similarity == b.similarity
                        && (cand.rect.area() > b.rect.area()
                            || (cand.rect.area() == b.rect.area()
                                && (cand.rect.y0(), cand.rect.x0()) < (b.rect.y0(), b.rect.x0()))))
            }
        };
        if better {
            best = Some(cand);
        }
    }
    best
}

/// Counts from [`attach_derived_boxes`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivationStats {
    pub derived: usize,
    pub no_ocr: usize,
    pub below_threshold: usize,
}

/// Default minimum similarity for a derived box to be trusted.
pub const DEFAULT_MIN_SIMILARITY: f64 = 0.5;

/// Sets `gt_box` from OCR for records lacking one. Matches with similarity
/// not above `min_similarity` are left unset.
pub fn attach_derived_boxes(
    records: &mut [VqaRecord],
    measure: SimilarityMeasure,
    min_similarity: f64,
) -> DerivationStats {
    let mut stats = DerivationStats::default();
    for r in records.iter_mut().filter(|r| r.gt_box.is_none()) {
        match derive_answer_bbox(r, measure) {
            None => stats.no_ocr += 1,
            Some(d) if d.similarity > min_similarity => {
                r.gt_box = Some(d.rect);
                stats.derived += 1;
            }
            Some(_) => stats.below_threshold += 1,
        }
    }
    stats
}

/// Answer-box size groups by relative area `S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeGroup {
    /// `S < 0.005`
    G1,
    /// `0.005 <= S < 0.05`
    G2,
    /// `S >= 0.05`
    G3,
}

impl SizeGroup {
    pub const ALL: [SizeGroup; 3] = [SizeGroup::G1, SizeGroup::G2, SizeGroup::G3];

    pub fn of(rel_size: f64) -> Self {
        if rel_size < 0.005 {
            SizeGroup::G1
        } else if rel_size < 0.05 {
            SizeGroup::G2
        } else {
            SizeGroup::G3
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SizeGroup::G1 => "< 0.005",
            SizeGroup::G2 => "[0.005, 0.05)",
            SizeGroup::G3 => ">= 0.05",
        }
    }
}

impl fmt::Display for SizeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// The size group of a record, when it has a box and known image size.
pub fn size_group_of(record: &VqaRecord) -> Option<SizeGroup> {
    let (w, h) = record.image_size()?;
    let rect = record.gt_box?;
    rel_size_in(&rect, w, h).ok().map(SizeGroup::of)
}

#[derive(Debug, Clone, Default)]
pub struct SizePartition<'a> {
    pub groups: BTreeMap<SizeGroup, Vec<&'a VqaRecord>>,
    /// Records without a box or image size, or with an out-of-bounds box.
    pub excluded: usize,
}

impl SizePartition<'_> {
    pub fn counts(&self) -> [usize; 3] {
        SizeGroup::ALL.map(|g| self.groups.get(&g).map_or(0, Vec::len))
    }
}

pub fn partition_by_size(records: &[VqaRecord]) -> SizePartition<'_> {
    let mut out = SizePartition::default();
    for r in records {
        match size_group_of(r) {
            Some(g) => out.groups.entry(g).or_default().push(r),
            None => out.excluded += 1,
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionType {
    Reading,
    ObjectAttributes,
    Existence,
    Categorization,
    Localization,
    Counting,
    Other,
}

impl QuestionType {
    pub const ALL: [QuestionType; 7] = [
        QuestionType::Reading,
        QuestionType::ObjectAttributes,
        QuestionType::Existence,
        QuestionType::Categorization,
        QuestionType::Localization,
        QuestionType::Counting,
        QuestionType::Other,
    ];
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuestionType::Reading => "Reading",
            QuestionType::ObjectAttributes => "Object Attributes",
            QuestionType::Existence => "Existence",
            QuestionType::Categorization => "Categorization",
            QuestionType::Localization => "Localization",
            QuestionType::Counting => "Counting",
            QuestionType::Other => "Other",
        })
    }
}

/// Two-word question prefixes and their types.
pub const QUESTION_PREFIXES: &[(&str, QuestionType)] = &[
    ("what letter", QuestionType::Reading),
    ("what brand", QuestionType::Reading),
    ("what pattern", QuestionType::ObjectAttributes),
    ("what color", QuestionType::ObjectAttributes),
    ("what breed", QuestionType::ObjectAttributes),
    ("what colors", QuestionType::ObjectAttributes),
    ("what style", QuestionType::ObjectAttributes),
    ("what material", QuestionType::ObjectAttributes),
    ("what shape", QuestionType::ObjectAttributes),
    ("is anyone", QuestionType::Existence),
    ("is there", QuestionType::Existence),
    ("are there", QuestionType::Existence),
    ("is that", QuestionType::Existence),
    ("are all", QuestionType::Existence),
    ("is everyone", QuestionType::Existence),
    ("is one", QuestionType::Existence),
    ("is she", QuestionType::Existence),
    ("is he", QuestionType::Existence),
    ("what street", QuestionType::Categorization),
    ("what direction", QuestionType::Categorization),
    ("what animal", QuestionType::Categorization),
    ("what fruit", QuestionType::Categorization),
    ("what vegetable", QuestionType::Categorization),
    ("what food", QuestionType::Categorization),
    ("what game", QuestionType::Categorization),
    ("what sport", QuestionType::Categorization),
    ("where is", QuestionType::Localization),
    ("where are", QuestionType::Localization),
    ("where was", QuestionType::Localization),
    ("how many", QuestionType::Counting),
    ("how much", QuestionType::Counting),
];

/// Looks up the lowercased first two whitespace-separated words.
pub fn classify_question_type(question: &str) -> QuestionType {
    let lower = question.to_lowercase();
    let prefix = lower.split_whitespace().take(2).collect::<Vec<_>>().join(" ");
    QUESTION_PREFIXES
        .iter()
        .find(|(p, _)| *p == prefix)
        .map_or(QuestionType::Other, |(_, t)| *t)
}

pub fn count_question_types<'a>(
    questions: impl IntoIterator<Item = &'a str>,
) -> BTreeMap<QuestionType, usize> {
    let mut counts: BTreeMap<QuestionType, usize> =
        QuestionType::ALL.iter().map(|t| (*t, 0)).collect();
    for q in questions {
        *counts.entry(classify_question_type(q)).or_default() += 1;
    }
    counts
}

/// Writes records as line-delimited JSON.
pub fn write_records(path: &Path, records: &[VqaRecord]) -> Result<(), DatasetError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| parse_err(path, e))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads line-delimited records. Relative image paths resolve against the
/// file's directory.
pub fn read_records(path: &Path) -> Result<Vec<VqaRecord>, DatasetError> {
    let f = File::open(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut r: VqaRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, format!("line {}: {e}", n + 1)))?;
        r.validate()?;
        if r.image_ref.is_relative() {
            r.image_ref = base.join(&r.image_ref);
        }
        out.push(r);
    }
    Ok(out)
}

/// Fills missing image dimensions from the image file headers.
pub fn fill_image_sizes(records: &mut [VqaRecord]) -> usize {
    let mut filled = 0;
    for r in records.iter_mut().filter(|r| r.image_size().is_none()) {
        if let Ok((w, h)) = image::image_dimensions(&r.image_ref) {
            r.image_width = Some(w);
            r.image_height = Some(h);
            filled += 1;
        }
    }
    filled
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn rect(x0: u32, y0: u32, x1: u32, y1: u32) -> Rect {
        Rect::new(x0, y0, x1, y1).unwrap()
    }

    fn record(id: &str, answers: &[&str]) -> VqaRecord {
        VqaRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            question_id: id.into(),
            image_ref: PathBuf::from("img.jpg"),
            question: "what does it say?".into(),
            answers: answers.iter().map(|s| s.to_string()).collect(),
            image_width: Some(100),
            image_height: Some(100),
            gt_box: None,
            ocr_tokens: None,
        }
    }

    fn tok(text: &str, r: Rect) -> OcrToken {
        OcrToken {
            text: text.into(),
            rect: r,
        }
    }

    /// Textbook dynamic-programming edit distance.
    fn levenshtein_oracle(a: &str, b: &str) -> usize {
        let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + sub);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(string_similarity("NY", "ny"), 1.0);
        let expected = 1.0 - levenshtein_oracle("abc", "abd") as f64 / 3.0;
        assert!((string_similarity("abc", "abd") - expected).abs() < 1e-12);
        assert!((expected - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(string_similarity("", "x"), 0.0);
        assert_eq!(string_similarity("", ""), 1.0);
        assert_eq!(string_similarity("  Stop ", "stop"), 1.0);
    }

    #[test]
    fn similarity_matches_oracle_on_words() {
        let words = ["kitten", "sitting", "michigan", "MICH", "", "a", "flaw", "lawn"];
        for a in words {
            for b in words {
                let (la, lb) = (a.to_lowercase(), b.to_lowercase());
                let max = la.chars().count().max(lb.chars().count());
                let oracle = if max == 0 {
                    1.0
                } else {
                    1.0 - levenshtein_oracle(&la, &lb) as f64 / max as f64
                };
                assert!((string_similarity(a, b) - oracle).abs() < 1e-12, "{a} {b}");
            }
        }
    }

    #[test]
    fn derive_box_examples() {
        let (b1, b2) = (rect(0, 0, 10, 10), rect(20, 20, 40, 40));
        let mut r = record("1", &["NY"; 10]);
        r.ocr_tokens = Some(vec![tok("NY", b1), tok("NYC", b2)]);
        assert_eq!(derive_answer_bbox(&r, SimilarityMeasure::Levenshtein).unwrap().rect, b1);

        let mut r = record("2", &["michigan"]);
        r.ocr_tokens = Some(vec![tok("MICHIGAN", b2)]);
        assert_eq!(derive_answer_bbox(&r, SimilarityMeasure::Levenshtein).unwrap().rect, b2);

        // Equal similarity: the larger box wins.
        let small = rect(0, 0, 10, 10);
        let large = rect(50, 50, 70, 70);
        let mut r = record("3", &["cat"]);
        r.ocr_tokens = Some(vec![tok("cap", small), tok("cab", large)]);
        assert_eq!(derive_answer_bbox(&r, SimilarityMeasure::Levenshtein).unwrap().rect, large);
    }

    #[test]
    fn derive_box_reading_order_tie_is_permutation_invariant() {
        let upper = rect(50, 0, 60, 10);
        let lower_left = rect(0, 20, 10, 30);
        let left = rect(0, 0, 10, 10);
        let tokens = vec![tok("x", upper), tok("x", lower_left), tok("x", left)];
        for rot in 0..3 {
            let mut t = tokens.clone();
            t.rotate_left(rot);
            let mut r = record("4", &["x"]);
            r.ocr_tokens = Some(t);
            assert_eq!(derive_answer_bbox(&r, SimilarityMeasure::Levenshtein).unwrap().rect, left);
        }
    }

    #[test]
    fn derive_box_without_ocr() {
        let r = record("5", &["x"]);
        assert!(derive_answer_bbox(&r, SimilarityMeasure::Levenshtein).is_none());
        let mut recs = vec![r.clone(), {
            let mut r = record("6", &["hello"]);
            r.ocr_tokens = Some(vec![tok("zzz", rect(0, 0, 5, 5))]);
            r
        }];
        let stats = attach_derived_boxes(&mut recs, SimilarityMeasure::Levenshtein, 0.5);
        assert_eq!(
            stats,
            DerivationStats {
                derived: 0,
                no_ocr: 1,
                below_threshold: 1
            }
        );
    }

    #[test]
    fn majority_answer_tie_goes_to_first() {
        let r = record("7", &["b", "a", "a", "B"]);
        assert_eq!(r.majority_answer(), Some("b"));
        let r = record("8", &["b", "a", "a"]);
        assert_eq!(r.majority_answer(), Some("a"));
    }

    #[test]
    fn size_group_boundaries() {
        assert_eq!(SizeGroup::of(0.0049), SizeGroup::G1);
        assert_eq!(SizeGroup::of(0.005), SizeGroup::G2);
        assert_eq!(SizeGroup::of(0.0499), SizeGroup::G2);
        assert_eq!(SizeGroup::of(0.05), SizeGroup::G3);
        assert_eq!(SizeGroup::of(1.0), SizeGroup::G3);
    }

    #[test]
    fn partition_six_records() {
        // 100x100 image: areas 1, 49 -> G1; 50, 400 -> G2; 500, 10000 -> G3.
        let boxes = [
            rect(0, 0, 1, 1),
            rect(0, 0, 7, 7),
            rect(0, 0, 5, 10),
            rect(0, 0, 20, 20),
            rect(0, 0, 50, 10),
            rect(0, 0, 100, 100),
        ];
        let mut recs: Vec<VqaRecord> = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mut r = record(&i.to_string(), &["a"]);
                r.gt_box = Some(*b);
                r
            })
            .collect();
        recs.push(record("nobox", &["a"]));
        let p = partition_by_size(&recs);
        assert_eq!(p.counts(), [2, 2, 2]);
        assert_eq!(p.excluded, 1);
    }

    #[test]
    fn question_type_examples() {
        assert_eq!(classify_question_type("How many dogs are here?"), QuestionType::Counting);
        assert_eq!(classify_question_type("What color is the bus?"), QuestionType::ObjectAttributes);
        assert_eq!(classify_question_type("Why is the sky blue?"), QuestionType::Other);
        assert_eq!(classify_question_type(""), QuestionType::Other);
        assert_eq!(classify_question_type("what"), QuestionType::Other);
        assert_eq!(classify_question_type("  WHERE   is it"), QuestionType::Localization);
    }

    #[test]
    fn prefix_table_has_no_duplicates() {
        let mut seen = std::collections::HashSet::new();
        for (p, _) in QUESTION_PREFIXES {
            assert!(seen.insert(*p), "duplicate prefix {p}");
            assert_eq!(p.split_whitespace().count(), 2);
        }
        assert_eq!(QUESTION_PREFIXES.len(), 31);
    }

    #[test]
    fn normalized_ocr_box_conversion() {
        let bb = json!({"top_left_x": 0.1, "top_left_y": 0.2, "width": 0.25, "height": 0.5});
        assert_eq!(normalized_box_to_rect(&bb, 200, 100).unwrap(), rect(20, 20, 70, 70));
        let tiny = json!({"top_left_x": 0.999, "top_left_y": 0.0, "width": 0.0, "height": 0.0});
        let r = normalized_box_to_rect(&tiny, 100, 100).unwrap();
        assert!(r.fits_within(100, 100));
        assert_eq!(r.area(), 1);
    }

    #[test]
    fn record_validation() {
        let mut r = record("v", &["a"]);
        r.gt_box = Some(rect(0, 0, 101, 5));
        assert!(r.validate().is_err());
        let mut r = record("v", &["a"]);
        r.question = "  ".into();
        assert!(r.validate().is_err());
        assert!(record("ok", &["a"]).validate().is_ok());
    }
}
