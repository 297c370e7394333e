//! Deterministic stand-ins for neural backends.
//!
//! The planted-target family works on images produced by
//! [`crate::fixtures`]: the answer region is painted in [`TARGET_RGB`] and
//! distractor objects in the [`DECOYS`] colors.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use super::{
    BackendError, BackendIdentity, Detection, Detector, Identified, RelevanceScorer,
    SaliencySource, Segmenter, VqaAnswer, VqaModel, VqaQuery,
};
use crate::geometry::{iou, ContentHash, Image, PatchMap, Rect};

pub const TARGET_RGB: [u8; 3] = [255, 0, 0];

/// Decoy colors with the confidence the synthetic detector assigns them.
pub const DECOYS: [([u8; 3], f64, &str); 2] =
    [([0, 0, 255], 0.6, "decoy-blue"), ([0, 255, 0], 0.2, "decoy-green")];

const TARGET_CONFIDENCE: f64 = 0.9;
const TARGET_LABEL: &str = "target";

fn synthetic_identity(name: &str) -> BackendIdentity {
    BackendIdentity::new(format!("synthetic-{name}"), env!("CARGO_PKG_VERSION"))
}

/// Scores a region by its IoU with a fixed planted target. The maximum, 1.0,
/// is reached exactly at the target.
#[derive(Debug, Clone)]
pub struct PlantedTargetScorer {
    target: Rect,
}

impl PlantedTargetScorer {
    pub fn new(target: Rect) -> Self {
        Self { target }
    }

    pub fn target(&self) -> Rect {
        self.target
    }
}

impl Identified for PlantedTargetScorer {
    fn identity(&self) -> BackendIdentity {
        synthetic_identity(&format!("planted{}", self.target))
    }
}

impl RelevanceScorer for PlantedTargetScorer {
    fn score_region(&self, _image: &Image, region: &Rect, _text: &str) -> Result<f64, BackendError> {
        Ok(iou(region, &self.target))
    }
}

/// Bounding box of every pixel exactly equal to `rgb`.
pub fn color_bbox(image: &Image, rgb: [u8; 3]) -> Option<Rect> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
    let w = image.width() as usize;
    for (i, px) in image.pixels().chunks_exact(3).enumerate() {
        if px == rgb {
            let (x, y) = ((i % w) as u32, (i / w) as u32);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    Rect::new(x0, y0, x1, y1).ok()
}

/// Like [`PlantedTargetScorer`], but reads the target from the
/// [`TARGET_RGB`] pixels of the source image. Images without a target
/// score 0 everywhere.
#[derive(Debug, Default)]
pub struct MarkerTargetScorer {
    located: Mutex<HashMap<ContentHash, Option<Rect>>>,
}

impl MarkerTargetScorer {
    pub fn new() -> Self {
        Self::default()
    }

    fn target_of(&self, image: &Image) -> Option<Rect> {
        let key = image.content_hash();
        if let Some(t) = self.located.lock().unwrap().get(&key) {
            return *t;
        }
        let t = color_bbox(image, TARGET_RGB);
        self.located.lock().unwrap().insert(key, t);
        t
    }
}

impl Identified for MarkerTargetScorer {
    fn identity(&self) -> BackendIdentity {
        synthetic_identity("marker-scorer")
    }
}

impl RelevanceScorer for MarkerTargetScorer {
    fn score_region(&self, image: &Image, region: &Rect, _text: &str) -> Result<f64, BackendError> {
        Ok(self.target_of(image).map_or(0.0, |t| iou(region, &t)))
    }
}

#[derive(Debug, Clone)]
pub struct ConstantScorer(pub f64);

impl Identified for ConstantScorer {
    fn identity(&self) -> BackendIdentity {
        synthetic_identity(&format!("constant-{}", self.0))
    }
}

impl RelevanceScorer for ConstantScorer {
    fn score_region(&self, _: &Image, _: &Rect, _: &str) -> Result<f64, BackendError> {
        Ok(self.0)
    }
}

/// Wraps a closure over `(image, region, text)`.
pub struct FnScorer<F> {
    name: String,
    f: F,
}

impl<F> FnScorer<F>
where
    F: Fn(&Image, &Rect, &str) -> f64 + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self {
            name: name.into(),
            f,
        }
    }
}

impl<F> Identified for FnScorer<F> {
    fn identity(&self) -> BackendIdentity {
        synthetic_identity(&format!("fn-{}", self.name))
    }
}

impl<F> RelevanceScorer for FnScorer<F>
where
    F: Fn(&Image, &Rect, &str) -> f64 + Send + Sync,
{
    fn score_region(&self, image: &Image, region: &Rect, text: &str) -> Result<f64, BackendError> {
        Ok((self.f)(image, region, text))
    }
}

/// Sleeps for a fixed time before delegating each call.
pub struct DelayedScorer<S> {
    inner: S,
    delay: Duration,
}

impl<S> DelayedScorer<S> {
    pub fn new(inner: S, delay: Duration) -> Self {
        Self { inner, delay }
    }
}

impl<S: Identified> Identified for DelayedScorer<S> {
    fn identity(&self) -> BackendIdentity {
        self.inner.identity()
    }
}

impl<S: RelevanceScorer> RelevanceScorer for DelayedScorer<S> {
    fn score_region(&self, image: &Image, region: &Rect, text: &str) -> Result<f64, BackendError> {
        std::thread::sleep(self.delay);
        self.inner.score_region(image, region, text)
    }
}

/// Returns a fixed detection list, filtered by the requested threshold.
#[derive(Debug, Clone, Default)]
pub struct StaticDetector {
    pub detections: Vec<Detection>,
}

impl Identified for StaticDetector {
    fn identity(&self) -> BackendIdentity {
        synthetic_identity("static-detector")
    }
}

impl Detector for StaticDetector {
    fn detect(&self, image: &Image, threshold: f64) -> Result<Vec<Detection>, BackendError> {
        Ok(self
            .detections
            .iter()
            .filter(|d| d.confidence >= threshold)
            .filter(|d| d.rect.fits_within(image.width(), image.height()))
            .cloned()
            .collect())
    }
}

#[derive(Debug, Clone, Default)]
pub struct StaticSegmenter {
    pub boxes: Vec<Rect>,
}

impl Identified for StaticSegmenter {
    fn identity(&self) -> BackendIdentity {
        synthetic_identity("static-segmenter")
    }
}

impl Segmenter for StaticSegmenter {
    fn segment(&self, image: &Image) -> Result<Vec<Rect>, BackendError> {
        Ok(self
            .boxes
            .iter()
            .filter(|b| b.fits_within(image.width(), image.height()))
            .copied()
            .collect())
    }
}

/// Detects the painted target and decoys by color.
#[derive(Debug, Clone, Default)]
pub struct MarkerDetector;

impl Identified for MarkerDetector {
    fn identity(&self) -> BackendIdentity {
        synthetic_identity("marker-detector")
    }
}

impl Detector for MarkerDetector {
    fn detect(&self, image: &Image, threshold: f64) -> Result<Vec<Detection>, BackendError> {
        let objects = std::iter::once((TARGET_RGB, TARGET_CONFIDENCE, TARGET_LABEL))
            .chain(DECOYS.iter().copied());
        Ok(objects
            .filter(|(_, conf, _)| *conf >= threshold)
            .filter_map(|(rgb, conf, label)| {
                color_bbox(image, rgb).map(|rect| Detection {
                    rect,
                    confidence: conf,
                    class_label: label.to_string(),
                })
            })
            .collect())
    }
}

/// Covering boxes of every painted object, target first.
#[derive(Debug, Clone, Default)]
pub struct MarkerSegmenter;

impl Identified for MarkerSegmenter {
    fn identity(&self) -> BackendIdentity {
        synthetic_identity("marker-segmenter")
    }
}

impl Segmenter for MarkerSegmenter {
    fn segment(&self, image: &Image) -> Result<Vec<Rect>, BackendError> {
        Ok(std::iter::once(TARGET_RGB)
            .chain(DECOYS.iter().map(|d| d.0))
            .filter_map(|rgb| color_bbox(image, rgb))
            .collect())
    }
}

/// Patch map whose cells hold the fraction of target-colored pixels.
#[derive(Debug, Clone)]
pub struct MarkerSaliency {
    pub rows: u32,
    pub cols: u32,
}

impl Default for MarkerSaliency {
    fn default() -> Self {
        Self { rows: 16, cols: 16 }
    }
}

impl Identified for MarkerSaliency {
    fn identity(&self) -> BackendIdentity {
        synthetic_identity(&format!("marker-saliency-{}x{}", self.rows, self.cols))
    }
}

impl SaliencySource for MarkerSaliency {
    fn saliency(&self, image: &Image, _question: &str) -> Result<PatchMap, BackendError> {
        let (rows, cols) = (self.rows as usize, self.cols as usize);
        let mut hits = vec![0u64; rows * cols];
        let mut totals = vec![0u64; rows * cols];
        let (w, h) = (image.width() as usize, image.height() as usize);
        for (i, px) in image.pixels().chunks_exact(3).enumerate() {
            let (x, y) = (i % w, i / w);
            let cell = (y * rows / h) * cols + x * cols / w;
            totals[cell] += 1;
            if px == TARGET_RGB {
                hits[cell] += 1;
            }
        }
        let values = hits
            .iter()
            .zip(&totals)
            .map(|(&hit, &n)| if n == 0 { 0.0 } else { hit as f64 / n as f64 })
            .collect();
        Ok(PatchMap::new(self.rows, self.cols, values)?)
    }
}

/// A scripted answer for one question.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedEntry {
    pub answer: String,
    /// When set, `answer` is only given if the region the model sees
    /// overlaps the planted box with at least this IoU; otherwise the
    /// model answers [`ScriptedVqaModel::fallback_answer`].
    pub planted: Option<(Rect, f64)>,
}

/// Table-driven VQA model keyed by question id, then by question text.
#[derive(Debug, Clone)]
pub struct ScriptedVqaModel {
    by_id: HashMap<String, ScriptedEntry>,
    by_text: HashMap<String, ScriptedEntry>,
    fallback_answer: String,
}

impl ScriptedVqaModel {
    pub fn new(fallback_answer: impl Into<String>) -> Self {
        Self {
            by_id: HashMap::new(),
            by_text: HashMap::new(),
            fallback_answer: fallback_answer.into(),
        }
    }

    pub fn with_id(mut self, question_id: impl Into<String>, entry: ScriptedEntry) -> Self {
        self.by_id.insert(question_id.into(), entry);
        self
    }

    pub fn with_text(mut self, question: impl Into<String>, entry: ScriptedEntry) -> Self {
        self.by_text.insert(question.into(), entry);
        self
    }

    pub fn fallback_answer(&self) -> &str {
        &self.fallback_answer
    }
}

impl Identified for ScriptedVqaModel {
    fn identity(&self) -> BackendIdentity {
        synthetic_identity("scripted-vqa")
    }
}

impl VqaModel for ScriptedVqaModel {
    fn answer(&self, query: &VqaQuery<'_>) -> Result<VqaAnswer, BackendError> {
        let original = query
            .images
            .first()
            .ok_or_else(|| BackendError::Failed("no image supplied".into()))?;
        let entry = self
            .by_id
            .get(query.question_id)
            .or_else(|| self.by_text.get(query.question));
        let answer = match entry {
            None => self.fallback_answer.clone(),
            Some(ScriptedEntry {
                answer,
                planted: None,
            }) => answer.clone(),
            Some(ScriptedEntry {
                answer,
                planted: Some((planted, min_iou)),
            }) => {
                let seen = query.crop.unwrap_or_else(|| original.full_rect());
                if iou(&seen, planted) >= *min_iou {
                    answer.clone()
                } else {
                    self.fallback_answer.clone()
                }
            }
        };
        Ok(VqaAnswer {
            answer,
            answer_score: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{shrink_side, Side};

    fn r(x0: u32, y0: u32, x1: u32, y1: u32) -> Rect {
        Rect::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn planted_scorer_peaks_at_target() {
        let img = Image::filled(8, 8, [0, 0, 0]).unwrap();
        let target = r(2, 1, 5, 4);
        let s = PlantedTargetScorer::new(target);
        assert_eq!(s.score_region(&img, &target, "q").unwrap(), 1.0);
        // Brute force over every rect on the 8x8 grid.
        for x0 in 0..8 {
            for y0 in 0..8 {
                for x1 in x0 + 1..=8 {
                    for y1 in y0 + 1..=8 {
                        let cand = r(x0, y0, x1, y1);
                        let v = s.score_region(&img, &cand, "q").unwrap();
                        if cand != target {
                            assert!(v < 1.0, "{cand:?} scored {v}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn planted_scorer_shrinking_toward_target_side_never_helps() {
        // r contains the target; cutting from the side that holds the target
        // removes target pixels, which never increases IoU.
        let img = Image::filled(10, 10, [0, 0, 0]).unwrap();
        let target = r(0, 0, 3, 3);
        let s = PlantedTargetScorer::new(target);
        for x1 in 3..=10 {
            for y1 in 3..=10 {
                let outer = r(0, 0, x1, y1);
                let base = s.score_region(&img, &outer, "").unwrap();
                for side in [Side::Top, Side::Left] {
                    if let Ok(inner) = shrink_side(&outer, side, 0.9) {
                        assert!(s.score_region(&img, &inner, "").unwrap() <= base);
                    }
                }
            }
        }
    }

    #[test]
    fn marker_scorer_finds_painted_target() {
        let target = r(3, 2, 6, 5);
        let img = Image::from_fn(10, 10, |x, y| {
            if target.contains_rect(&r(x, y, x + 1, y + 1)) {
                TARGET_RGB
            } else {
                [10, 10, 10]
            }
        })
        .unwrap();
        let s = MarkerTargetScorer::new();
        assert_eq!(s.score_region(&img, &target, "").unwrap(), 1.0);
        assert_eq!(s.score(&img, "").unwrap(), 9.0 / 100.0);
        let blank = Image::filled(4, 4, [1, 2, 3]).unwrap();
        assert_eq!(s.score(&blank, "").unwrap(), 0.0);
    }

    #[test]
    fn static_detector_respects_threshold() {
        let img = Image::filled(20, 20, [0, 0, 0]).unwrap();
        let det = StaticDetector {
            detections: vec![
                Detection {
                    rect: r(0, 0, 5, 5),
                    confidence: 0.1,
                    class_label: "a".into(),
                },
                Detection {
                    rect: r(0, 0, 6, 6),
                    confidence: 0.25,
                    class_label: "b".into(),
                },
            ],
        };
        let out = det.detect(&img, 0.25).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out.iter().all(|d| d.confidence >= 0.25));
    }

    #[test]
    fn scripted_model_iou_gate() {
        let img = Image::filled(100, 100, [0, 0, 0]).unwrap();
        let planted = r(0, 0, 20, 20);
        let m = ScriptedVqaModel::new("unknown").with_id(
            "q1",
            ScriptedEntry {
                answer: "stop".into(),
                planted: Some((planted, 0.5)),
            },
        );
        let mut q = VqaQuery {
            question_id: "q1",
            question: "what does it say?",
            images: vec![&img],
            crop: None,
        };
        assert_eq!(m.answer(&q).unwrap().answer, "unknown");
        q.crop = Some(r(0, 0, 22, 22));
        assert_eq!(m.answer(&q).unwrap().answer, "stop");
        q.question_id = "other";
        assert_eq!(m.answer(&q).unwrap().answer, "unknown");
    }

    #[test]
    fn marker_saliency_marks_target_cells() {
        let img = Image::from_fn(16, 16, |x, y| {
            if x < 4 && y < 4 {
                TARGET_RGB
            } else {
                [0, 0, 0]
            }
        })
        .unwrap();
        let pm = MarkerSaliency { rows: 4, cols: 4 }.saliency(&img, "").unwrap();
        assert_eq!(pm.get(0, 0), 1.0);
        assert_eq!(pm.values().iter().filter(|v| **v > 0.0).count(), 1);
    }
}
