//! Seeded synthetic datasets with planted answer regions.
//!
//! Each image is low-saturation noise with a [`TARGET_RGB`] rectangle (the
//! region the question is about) and two decoy rectangles. The record's
//! `gt_box` is the planted rectangle, so every strategy, including
//! `human`, can run against the synthetic backends in
//! [`crate::backends::synthetic`].

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backends::synthetic::{
    MarkerDetector, MarkerSaliency, MarkerSegmenter, MarkerTargetScorer, ScriptedEntry,
    ScriptedVqaModel, DECOYS, TARGET_RGB,
};
use crate::datasets::{write_records, DatasetError, VqaRecord, RECORD_SCHEMA_VERSION};
use crate::geometry::{iou, GeometryError, Image, Rect};
use crate::harness::BackendSet;

const WORDS: [&str; 8] = ["stop", "exit", "cafe", "open", "sale", "bus", "taxi", "hotel"];
const QUESTIONS: [&str; 4] = [
    "what does the sign say?",
    "what is written on the board?",
    "what word is on the label?",
    "what letter sequence is painted on the wall?",
];

/// The answer the scripted model gives when it cannot see the target.
pub const UNKNOWN_ANSWER: &str = "unknown";
/// IoU the visible region must reach for the scripted model to answer.
pub const SCRIPTED_MIN_IOU: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n: usize,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    /// Target area as a fraction of the image, sampled uniformly.
    pub target_fraction: (f64, f64),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 20,
            seed: 0,
            width: 256,
            height: 192,
            target_fraction: (1.0 / 16.0, 0.2),
        }
    }
}

/// A random rect of roughly `fraction` of the image area, aspect in [0.5, 2].
pub fn random_rect(rng: &mut impl Rng, width: u32, height: u32, fraction: f64) -> Rect {
    let area = fraction * f64::from(width) * f64::from(height);
    let aspect: f64 = rng.gen_range(0.5..2.0);
    let w = ((area * aspect).sqrt().round() as u32).clamp(1, width);
    let h = ((area / f64::from(w)).round() as u32).clamp(1, height);
    let x0 = rng.gen_range(0..=width - w);
    let y0 = rng.gen_range(0..=height - h);
    Rect::new(x0, y0, x0 + w, y0 + h).expect("non-empty rect")
}

pub struct SyntheticItem {
    pub record: VqaRecord,
    pub image: Image,
}

pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticItem>, GeometryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    (0..spec.n)
        .map(|i| {
            let frac = rng.gen_range(spec.target_fraction.0..=spec.target_fraction.1);
            let target = random_rect(&mut rng, w, h, frac);
            let decoys: Vec<Rect> = (0..DECOYS.len())
                .map(|_| {
                    let f = rng.gen_range(0.02..0.1);
                    random_rect(&mut rng, w, h, f)
                })
                .collect();
            let noise_seed: u64 = rng.gen();
            let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
            let image = Image::from_fn(w, h, |x, y| {
                let px = Rect::new(x, y, x + 1, y + 1).expect("unit rect");
                if target.contains_rect(&px) {
                    TARGET_RGB
                } else if let Some(k) = decoys.iter().position(|d| d.contains_rect(&px)) {
                    DECOYS[k].0
                } else {
                    [noise.gen_range(40..200), noise.gen_range(40..200), noise.gen_range(40..200)]
                }
            })?;
            // Decoys are painted over by the target, so the target stays whole.
            let answer = WORDS[rng.gen_range(0..WORDS.len())];
            let mut answers = vec![answer.to_string(); 10];
            let noisy = rng.gen_range(0..3);
            for a in answers.iter_mut().take(noisy) {
                *a = WORDS[(i + 1) % WORDS.len()].to_string();
            }
            let record = VqaRecord {
                schema_version: RECORD_SCHEMA_VERSION,
                question_id: format!("syn{i:05}"),
                image_ref: PathBuf::from(format!("images/syn{i:05}.png")),
                question: QUESTIONS[i % QUESTIONS.len()].to_string(),
                answers,
                image_width: Some(w),
                image_height: Some(h),
                gt_box: Some(target),
                ocr_tokens: None,
            };
            Ok(SyntheticItem { record, image })
        })
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Writes `images/*.png` and `records.jsonl` under `dir`; returns the
/// records file path.
pub fn write_fixture(dir: &Path, spec: &SyntheticSpec) -> Result<PathBuf, FixtureError> {
    std::fs::create_dir_all(dir.join("images"))?;
    let items = generate(spec)?;
    for item in &items {
        item.image.save_png(&dir.join(&item.record.image_ref))?;
    }
    let records: Vec<VqaRecord> = items.into_iter().map(|i| i.record).collect();
    let path = dir.join("records.jsonl");
    write_records(&path, &records)?;
    Ok(path)
}

/// A scripted model that answers a record's majority answer only when the
/// region it sees overlaps the planted box with IoU >= [`SCRIPTED_MIN_IOU`].
pub fn scripted_model_for(records: &[VqaRecord]) -> ScriptedVqaModel {
    records.iter().fold(ScriptedVqaModel::new(UNKNOWN_ANSWER), |m, r| {
        let answer = r.majority_answer().unwrap_or(UNKNOWN_ANSWER).to_string();
        m.with_id(
            r.question_id.clone(),
            ScriptedEntry {
                answer,
                planted: r.gt_box.map(|b| (b, SCRIPTED_MIN_IOU)),
            },
        )
    })
}

/// The full synthetic backend set for records produced by [`generate`].
pub fn synthetic_backends(records: &[VqaRecord]) -> BackendSet {
    use std::sync::Arc;
    BackendSet {
        scorer: Some(Arc::new(MarkerTargetScorer::new())),
        detector: Some(Arc::new(MarkerDetector)),
        segmenter: Some(Arc::new(MarkerSegmenter)),
        saliency: Some(Arc::new(MarkerSaliency::default())),
        vqa: Some(Arc::new(scripted_model_for(records))),
    }
}

/// IoU of the full image with the planted target.
pub fn full_image_iou(record: &VqaRecord) -> Option<f64> {
    let (w, h) = record.image_size()?;
    Some(iou(&Rect::full(w, h).ok()?, &record.gt_box?))
}
