//! Cropping strategies: each maps an image and a question to a [`CropResult`].
//!
//! Ties are always broken toward the earliest candidate. Candidate order is
//! fixed: the full image first (when included), then the strategy's own
//! candidates in generation order. Iterative refinement evaluates sides in
//! [`Side::ALL`] order.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, Detector, RelevanceScorer, SaliencySource, Segmenter};
use crate::geometry::{patch_to_pixel_rect, round_half_up, shrink_side, GeometryError, Image, Rect, Side};

#[derive(Debug, thiserror::Error)]
pub enum StrategyError {
    #[error("strategy not applicable: {0}")]
    NotApplicable(String),
    #[error("missing backend: {0}")]
    MissingBackend(&'static str),
    #[error("invalid strategy config: {0}")]
    InvalidConfig(String),
    #[error("scorer returned non-finite score {0}")]
    NonFiniteScore(f64),
    #[error("saliency map has no positive value")]
    DegenerateSaliency,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    None,
    Human,
    Iterative,
    Detector,
    Segmenter,
    SlidingWindow,
    Patchmap,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::None,
        StrategyKind::Human,
        StrategyKind::Iterative,
        StrategyKind::Detector,
        StrategyKind::Segmenter,
        StrategyKind::SlidingWindow,
        StrategyKind::Patchmap,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::None => "none",
            StrategyKind::Human => "human",
            StrategyKind::Iterative => "iterative",
            StrategyKind::Detector => "detector",
            StrategyKind::Segmenter => "segmenter",
            StrategyKind::SlidingWindow => "sliding_window",
            StrategyKind::Patchmap => "patchmap",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

/// What the VQA model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedMode {
    CropOnly,
    /// Original image followed by the crop.
    ConcatWithOriginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub ratio: f64,
    pub iterations: u32,
    pub detector_conf: f64,
    pub window_fractions: Vec<f64>,
    pub window_stride_fraction: f64,
    pub patch_threshold: f64,
    pub include_full_image_candidate: bool,
    pub feed_mode: FeedMode,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Iterative,
            ratio: 0.9,
            iterations: 20,
            detector_conf: 0.25,
            window_fractions: vec![0.5, 0.65, 0.8],
            window_stride_fraction: 0.5,
            patch_threshold: 0.5,
            include_full_image_candidate: true,
            feed_mode: FeedMode::ConcatWithOriginal,
        }
    }
}

impl StrategyConfig {
    pub fn with_kind(kind: StrategyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        let bad = |m: String| Err(StrategyError::InvalidConfig(m));
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return bad(format!("ratio {} not in (0,1)", self.ratio));
        }
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.detector_conf) {
            return bad(format!("detector confidence {} not in [0,1]", self.detector_conf));
        }
        if !(self.patch_threshold > 0.0 && self.patch_threshold <= 1.0) {
            return bad(format!("patch threshold {} not in (0,1]", self.patch_threshold));
        }
        if self.window_fractions.is_empty() {
            return bad("window_fractions is empty".into());
        }
        if let Some(f) = self
            .window_fractions
            .iter()
            .chain(std::iter::once(&self.window_stride_fraction))
            .find(|f| !(**f > 0.0 && **f <= 1.0))
        {
            return bad(format!("window fraction {f} not in (0,1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub rect: Rect,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropResult {
    pub rect: Rect,
    /// Absent for strategies that do not score (human, none).
    pub score: Option<f64>,
    /// Every candidate evaluated, in evaluation order.
    pub trace: Vec<TraceEntry>,
    /// Set when the strategy produced no candidates of its own and fell
    /// back to the full image.
    pub fallback: bool,
}

impl CropResult {
    fn unscored(rect: Rect) -> Self {
        Self {
            rect,
            score: None,
            trace: Vec::new(),
            fallback: false,
        }
    }
}

/// Index of the first maximum.
fn first_argmax(trace: &[TraceEntry]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in trace.iter().enumerate() {
        if best.is_none_or(|b| e.score > trace[b].score) {
            best = Some(i);
        }
    }
    best
}

fn score_checked(
    scorer: &dyn RelevanceScorer,
    img: &Image,
    rect: &Rect,
    question: &str,
) -> Result<f64, StrategyError> {
    let s = scorer.score_region(img, rect, question)?;
    if s.is_finite() {
        Ok(s)
    } else {
        Err(StrategyError::NonFiniteScore(s))
    }
}

fn from_trace(trace: Vec<TraceEntry>) -> CropResult {
    let best = first_argmax(&trace).expect("trace is non-empty");
    CropResult {
        rect: trace[best].rect,
        score: Some(trace[best].score),
        trace,
        fallback: false,
    }
}

/// Uses the supplied ground-truth box unchanged.
pub fn human_crop(gt_box: Option<Rect>) -> Result<CropResult, StrategyError> {
    gt_box
        .map(CropResult::unscored)
        .ok_or_else(|| StrategyError::NotApplicable("record has no ground-truth box".into()))
}

/// Progressive refinement from the full image.
///
/// Each iteration scores the four single-side shrinks of the current rect
/// and moves to the best one. The answer is the best rect over every
/// evaluation. Refinement stops early when any shrink would be degenerate.
pub fn iterative_refine(
    img: &Image,
    question: &str,
    scorer: &dyn RelevanceScorer,
    cfg: &StrategyConfig,
) -> Result<CropResult, StrategyError> {
    if cfg.iterations < 1 {
        return Err(StrategyError::InvalidConfig("iterations must be at least 1".into()));
    }
    let full = img.full_rect();
    let mut trace = Vec::with_capacity(4 * cfg.iterations as usize + 1);
    if cfg.include_full_image_candidate {
        trace.push(TraceEntry {
            rect: full,
            score: score_checked(scorer, img, &full, question)?,
        });
    }
    let mut current = full;
    for _ in 0..cfg.iterations {
        let shrinks: Result<Vec<Rect>, GeometryError> = Side::ALL
            .iter()
            .map(|&side| shrink_side(&current, side, cfg.ratio))
            .collect();
        let shrinks = match shrinks {
            Ok(s) => s,
            Err(GeometryError::Degenerate { .. }) => break,
            Err(e) => return Err(e.into()),
        };
        let start = trace.len();
        for rect in shrinks {
            let score = score_checked(scorer, img, &rect, question)?;
            trace.push(TraceEntry { rect, score });
        }
        let step = first_argmax(&trace[start..]).expect("four candidates");
        current = trace[start + step].rect;
    }
    if trace.is_empty() {
        // The very first shrink was degenerate (1px image side) and the full
        // image was excluded; the full image is the only sensible answer.
        return Ok(CropResult {
            fallback: true,
            ..CropResult::unscored(full)
        });
    }
    Ok(from_trace(trace))
}

/// Scores each candidate crop and keeps the best; an empty list yields the
/// full image with `fallback` set.
pub fn select_best_candidate(
    img: &Image,
    question: &str,
    candidates: &[Rect],
    scorer: &dyn RelevanceScorer,
) -> Result<CropResult, StrategyError> {
    if candidates.is_empty() {
        return Ok(CropResult {
            fallback: true,
            ..CropResult::unscored(img.full_rect())
        });
    }
    let trace = candidates
        .iter()
        .map(|rect| {
            Ok(TraceEntry {
                rect: *rect,
                score: score_checked(scorer, img, rect, question)?,
            })
        })
        .collect::<Result<Vec<_>, StrategyError>>()?;
    Ok(from_trace(trace))
}

fn with_full_image(img: &Image, own: Vec<Rect>, cfg: &StrategyConfig) -> Vec<Rect> {
    let mut out = Vec::with_capacity(own.len() + 1);
    if cfg.include_full_image_candidate {
        out.push(img.full_rect());
    }
    for r in own {
        if !out.contains(&r) {
            out.push(r);
        }
    }
    out
}

fn select_with_fallback(
    img: &Image,
    question: &str,
    own: Vec<Rect>,
    scorer: &dyn RelevanceScorer,
    cfg: &StrategyConfig,
) -> Result<CropResult, StrategyError> {
    let fallback = own.is_empty();
    let candidates = with_full_image(img, own, cfg);
    let mut result = select_best_candidate(img, question, &candidates, scorer)?;
    result.fallback |= fallback;
    Ok(result)
}

/// Picks among detector boxes above `cfg.detector_conf`.
pub fn detector_crop(
    img: &Image,
    question: &str,
    det: &dyn Detector,
    scorer: &dyn RelevanceScorer,
    cfg: &StrategyConfig,
) -> Result<CropResult, StrategyError> {
    let boxes = det
        .detect(img, cfg.detector_conf)?
        .into_iter()
        .filter(|d| d.confidence >= cfg.detector_conf)
        .map(|d| d.rect)
        .collect();
    select_with_fallback(img, question, boxes, scorer, cfg)
}

/// Picks among the covering boxes of segmentation masks.
pub fn segmenter_crop(
    img: &Image,
    question: &str,
    seg: &dyn Segmenter,
    scorer: &dyn RelevanceScorer,
    cfg: &StrategyConfig,
) -> Result<CropResult, StrategyError> {
    let boxes = seg.segment(img)?;
    select_with_fallback(img, question, boxes, scorer, cfg)
}

/// Window origins along one axis; the last window is snapped to the edge.
fn window_positions(extent: u32, window: u32, stride: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut p = 0;
    while p + window <= extent {
        out.push(p);
        p += stride;
    }
    if out.last().is_none_or(|&last| last + window < extent) {
        out.push(extent - window);
    }
    out
}

/// Sliding-window candidates, full image excluded, duplicates removed.
pub fn sliding_windows(width: u32, height: u32, cfg: &StrategyConfig) -> Vec<Rect> {
    let mut out: Vec<Rect> = Vec::new();
    for &f in &cfg.window_fractions {
        let size = |extent: u32| (round_half_up(f * f64::from(extent)).max(1) as u32).min(extent);
        let (ww, wh) = (size(width), size(height));
        let stride = |w: u32| round_half_up(cfg.window_stride_fraction * f64::from(w)).max(1) as u32;
        for y in window_positions(height, wh, stride(wh)) {
            for x in window_positions(width, ww, stride(ww)) {
                let r = Rect::new(x, y, x + ww, y + wh).expect("window inside image");
                if !out.contains(&r) {
                    out.push(r);
                }
            }
        }
    }
    out
}

pub fn sliding_window_crop(
    img: &Image,
    question: &str,
    scorer: &dyn RelevanceScorer,
    cfg: &StrategyConfig,
) -> Result<CropResult, StrategyError> {
    if cfg.window_fractions.is_empty() {
        return Err(StrategyError::InvalidConfig("window_fractions is empty".into()));
    }
    let candidates = with_full_image(img, sliding_windows(img.width(), img.height(), cfg), cfg);
    select_best_candidate(img, question, &candidates, scorer)
}

/// Thresholds a saliency map at `cfg.patch_threshold` of its maximum and
/// returns the pixel box of the 4-connected component holding the maximum.
/// The score is the mean raw saliency inside that component.
pub fn patchmap_crop(
    img: &Image,
    question: &str,
    sal: &dyn SaliencySource,
    cfg: &StrategyConfig,
) -> Result<CropResult, StrategyError> {
    let pm = sal.saliency(img, question)?;
    let (rows, cols) = (pm.rows() as usize, pm.cols() as usize);
    let values = pm.values();
    let mut peak = 0usize;
    for (i, v) in values.iter().enumerate() {
        if *v > values[peak] {
            peak = i;
        }
    }
    let max = values[peak];
    if max.is_nan() || max <= 0.0 {
        return Err(StrategyError::DegenerateSaliency);
    }
    let hot: Vec<bool> = values.iter().map(|v| v / max >= cfg.patch_threshold).collect();
    let mut seen = vec![false; values.len()];
    let mut queue = VecDeque::from([peak]);
    seen[peak] = true;
    let (mut r0, mut c0, mut r1, mut c1) = (rows, cols, 0, 0);
    let (mut sum, mut n) = (0.0, 0usize);
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / cols, i % cols);
        r0 = r0.min(r);
        c0 = c0.min(c);
        r1 = r1.max(r + 1);
        c1 = c1.max(c + 1);
        sum += values[i];
        n += 1;
        let mut visit = |j: usize| {
            if hot[j] && !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        };
        if r > 0 {
            visit(i - cols);
        }
        if r + 1 < rows {
            visit(i + cols);
        }
        if c > 0 {
            visit(i - 1);
        }
        if c + 1 < cols {
            visit(i + 1);
        }
    }
    let grid = Rect::new(c0 as u32, r0 as u32, c1 as u32, r1 as u32)?;
    let rect = patch_to_pixel_rect(&grid, &pm, img.width(), img.height())?;
    let score = sum / n as f64;
    Ok(CropResult {
        rect,
        score: Some(score),
        trace: vec![TraceEntry { rect, score }],
        fallback: false,
    })
}

/// The backends a strategy may need.
#[derive(Clone, Default)]
pub struct StrategyBackends {
    pub scorer: Option<Arc<dyn RelevanceScorer>>,
    pub detector: Option<Arc<dyn Detector>>,
    pub segmenter: Option<Arc<dyn Segmenter>>,
    pub saliency: Option<Arc<dyn SaliencySource>>,
}

impl StrategyBackends {
    /// Fails fast when `kind` needs a backend that is not configured.
    pub fn check(&self, kind: StrategyKind) -> Result<(), StrategyError> {
        let need_scorer = matches!(
            kind,
            StrategyKind::Iterative
                | StrategyKind::Detector
                | StrategyKind::Segmenter
                | StrategyKind::SlidingWindow
        );
        if need_scorer && self.scorer.is_none() {
            return Err(StrategyError::MissingBackend("scorer"));
        }
        match kind {
            StrategyKind::Detector if self.detector.is_none() => {
                Err(StrategyError::MissingBackend("detector"))
            }
            StrategyKind::Segmenter if self.segmenter.is_none() => {
                Err(StrategyError::MissingBackend("segmenter"))
            }
            StrategyKind::Patchmap if self.saliency.is_none() => {
                Err(StrategyError::MissingBackend("saliency"))
            }
            _ => Ok(()),
        }
    }
}

/// Dispatches on `cfg.kind`. `none` returns the full image unscored.
pub fn run_strategy(
    cfg: &StrategyConfig,
    backends: &StrategyBackends,
    img: &Image,
    question: &str,
    gt_box: Option<Rect>,
) -> Result<CropResult, StrategyError> {
    backends.check(cfg.kind)?;
    let scorer = || backends.scorer.as_deref().expect("checked");
    match cfg.kind {
        StrategyKind::None => Ok(CropResult::unscored(img.full_rect())),
        StrategyKind::Human => human_crop(gt_box),
        StrategyKind::Iterative => iterative_refine(img, question, scorer(), cfg),
        StrategyKind::Detector => detector_crop(
            img,
            question,
            backends.detector.as_deref().expect("checked"),
            scorer(),
            cfg,
        ),
        StrategyKind::Segmenter => segmenter_crop(
            img,
            question,
            backends.segmenter.as_deref().expect("checked"),
            scorer(),
            cfg,
        ),
        StrategyKind::SlidingWindow => sliding_window_crop(img, question, scorer(), cfg),
        StrategyKind::Patchmap => patchmap_crop(
            img,
            question,
            backends.saliency.as_deref().expect("checked"),
            cfg,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::synthetic::{
        ConstantScorer, FnScorer, PlantedTargetScorer, StaticDetector, StaticSegmenter,
    };
    use crate::backends::{BackendIdentity, Detection, Identified};
    use crate::geometry::{iou, PatchMap};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn r(x0: u32, y0: u32, x1: u32, y1: u32) -> Rect {
        Rect::new(x0, y0, x1, y1).unwrap()
    }

    fn blank(w: u32, h: u32) -> Image {
        Image::filled(w, h, [0, 0, 0]).unwrap()
    }

    struct CountingScorer<S> {
        inner: S,
        calls: AtomicUsize,
    }

    impl<S: Identified> Identified for CountingScorer<S> {
        fn identity(&self) -> BackendIdentity {
            self.inner.identity()
        }
    }

    impl<S: RelevanceScorer> RelevanceScorer for CountingScorer<S> {
        fn score_region(&self, i: &Image, r: &Rect, t: &str) -> Result<f64, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.score_region(i, r, t)
        }
    }

    struct FixedSaliency(PatchMap);

    impl Identified for FixedSaliency {
        fn identity(&self) -> BackendIdentity {
            BackendIdentity::new("fixed-saliency", "0")
        }
    }

    impl SaliencySource for FixedSaliency {
        fn saliency(&self, _: &Image, _: &str) -> Result<PatchMap, BackendError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn human_crop_uses_ground_truth() {
        let res = human_crop(Some(r(10, 10, 50, 50))).unwrap();
        assert_eq!(res.rect, r(10, 10, 50, 50));
        assert!(res.trace.is_empty());
        assert!(res.score.is_none());
        assert!(matches!(human_crop(None), Err(StrategyError::NotApplicable(_))));
        let img = blank(64, 48);
        assert_eq!(human_crop(Some(img.full_rect())).unwrap().rect, img.full_rect());
    }

    #[test]
    fn iterative_improves_on_planted_target() {
        let img = blank(1000, 1000);
        let target = r(100, 120, 400, 380);
        let scorer = PlantedTargetScorer::new(target);
        let res = iterative_refine(&img, "q", &scorer, &StrategyConfig::default()).unwrap();
        assert!(iou(&res.rect, &target) > iou(&img.full_rect(), &target));
        assert_eq!(res.score, Some(iou(&res.rect, &target)));
    }

    #[test]
    fn iterative_constant_scorer_keeps_full_image() {
        let img = blank(200, 100);
        let res = iterative_refine(&img, "q", &ConstantScorer(0.3), &StrategyConfig::default())
            .unwrap();
        assert_eq!(res.rect, img.full_rect());
        assert_eq!(res.trace.len(), 81);
    }

    #[test]
    fn iterative_left_preferring_scorer_contracts_width() {
        // Scores grow as the left edge moves right, so "left" wins each step.
        let img = blank(1000, 1000);
        let scorer = FnScorer::new("left", |_: &Image, r: &Rect, _: &str| f64::from(r.x0()));
        let res = iterative_refine(&img, "q", &scorer, &StrategyConfig::default()).unwrap();
        // Oracle: iterate the rounding rule by hand.
        let mut width = 1000i64;
        for _ in 0..20 {
            width -= round_half_up(0.1 * width as f64).max(1);
        }
        assert_eq!(i64::from(res.rect.width()), width);
        assert_eq!(res.rect.height(), 1000);
        let ideal = 0.9f64.powi(20) * 1000.0;
        assert!((f64::from(res.rect.width()) - ideal).abs() <= 20.0);
    }

    #[test]
    fn iterative_call_count_and_nesting() {
        let img = blank(300, 200);
        let scorer = CountingScorer {
            inner: PlantedTargetScorer::new(r(10, 10, 60, 50)),
            calls: AtomicUsize::new(0),
        };
        let cfg = StrategyConfig {
            iterations: 7,
            ..StrategyConfig::default()
        };
        let res = iterative_refine(&img, "q", &scorer, &cfg).unwrap();
        assert_eq!(scorer.calls.load(Ordering::SeqCst), 4 * 7 + 1);
        assert_eq!(res.trace.len(), 29);
        // Accepted path: the argmax of each block of four.
        let mut prev = img.full_rect();
        for block in res.trace[1..].chunks(4) {
            let step = first_argmax(block).unwrap();
            assert!(prev.contains_rect(&block[step].rect) && prev != block[step].rect);
            prev = block[step].rect;
        }
    }

    #[test]
    fn iterative_stops_when_degenerate() {
        let img = blank(6, 6);
        let scorer = ConstantScorer(1.0);
        let cfg = StrategyConfig {
            include_full_image_candidate: false,
            ..StrategyConfig::default()
        };
        let res = iterative_refine(&img, "q", &scorer, &cfg).unwrap();
        assert!(res.trace.len() < 80);
        assert_eq!(res.trace.len() % 4, 0);
        let tiny = blank(1, 5);
        let res = iterative_refine(&tiny, "q", &scorer, &cfg).unwrap();
        assert!(res.fallback);
        assert_eq!(res.rect, tiny.full_rect());
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let img = blank(50, 50);
        let scorer = ConstantScorer(f64::NAN);
        assert!(matches!(
            iterative_refine(&img, "q", &scorer, &StrategyConfig::default()),
            Err(StrategyError::NonFiniteScore(_))
        ));
    }

    #[test]
    fn select_best_examples() {
        let img = blank(100, 100);
        let cands = [r(0, 0, 10, 10), r(10, 10, 20, 20), r(20, 20, 30, 30)];
        let scores = [0.2, 0.8, 0.5];
        let scorer = FnScorer::new("table", move |_: &Image, rect: &Rect, _: &str| {
            scores[(rect.x0() / 10) as usize]
        });
        let res = select_best_candidate(&img, "q", &cands, &scorer).unwrap();
        assert_eq!(res.rect, cands[1]);
        assert_eq!(res.score, Some(0.8));

        let tie = select_best_candidate(&img, "q", &cands[..2], &ConstantScorer(0.8)).unwrap();
        assert_eq!(tie.rect, cands[0]);

        let empty = select_best_candidate(&img, "q", &[], &ConstantScorer(0.8)).unwrap();
        assert!(empty.fallback);
        assert_eq!(empty.rect, img.full_rect());
    }

    fn without_full_image() -> StrategyConfig {
        StrategyConfig {
            include_full_image_candidate: false,
            ..StrategyConfig::default()
        }
    }

    #[test]
    fn detector_crop_examples() {
        let img = blank(100, 100);
        let scorer = ConstantScorer(0.5);
        let one = StaticDetector {
            detections: vec![Detection {
                rect: r(5, 5, 20, 20),
                confidence: 0.7,
                class_label: "car".into(),
            }],
        };
        let res = detector_crop(&img, "q", &one, &scorer, &without_full_image()).unwrap();
        assert_eq!(res.rect, r(5, 5, 20, 20));

        let none = StaticDetector::default();
        let res = detector_crop(&img, "q", &none, &scorer, &StrategyConfig::default()).unwrap();
        assert!(res.fallback);
        assert_eq!(res.rect, img.full_rect());

        let target = r(40, 40, 70, 70);
        let two = StaticDetector {
            detections: vec![
                Detection {
                    rect: r(0, 0, 30, 30),
                    confidence: 0.9,
                    class_label: "a".into(),
                },
                Detection {
                    rect: target,
                    confidence: 0.3,
                    class_label: "b".into(),
                },
                Detection {
                    rect: r(41, 41, 70, 70),
                    confidence: 0.1,
                    class_label: "below threshold".into(),
                },
            ],
        };
        let planted = PlantedTargetScorer::new(target);
        let res = detector_crop(&img, "q", &two, &planted, &StrategyConfig::default()).unwrap();
        assert_eq!(res.rect, target);
        assert_eq!(res.trace.len(), 3);
    }

    #[test]
    fn segmenter_crop_examples() {
        let img = blank(100, 100);
        let scorer = ConstantScorer(0.5);
        let one = StaticSegmenter {
            boxes: vec![r(1, 2, 30, 40)],
        };
        let res = segmenter_crop(&img, "q", &one, &scorer, &without_full_image()).unwrap();
        assert_eq!(res.rect, r(1, 2, 30, 40));

        let res = segmenter_crop(&img, "q", &StaticSegmenter::default(), &scorer, &without_full_image())
            .unwrap();
        assert!(res.fallback);
        assert_eq!(res.rect, img.full_rect());

        let target = r(60, 10, 90, 45);
        let two = StaticSegmenter {
            boxes: vec![r(0, 50, 40, 100), target],
        };
        let res = segmenter_crop(
            &img,
            "q",
            &two,
            &PlantedTargetScorer::new(target),
            &StrategyConfig::default(),
        )
        .unwrap();
        assert_eq!(res.rect, target);
    }

    #[test]
    fn sliding_window_enumeration() {
        let cfg = StrategyConfig {
            window_fractions: vec![0.5],
            window_stride_fraction: 0.5,
            ..StrategyConfig::default()
        };
        // Oracle: 3 origins per axis (0, 25, 50) for a 50px window on 100px.
        let mut expected = Vec::new();
        for y in [0, 25, 50] {
            for x in [0, 25, 50] {
                expected.push(r(x, y, x + 50, y + 50));
            }
        }
        assert_eq!(sliding_windows(100, 100, &cfg), expected);
        let img = blank(100, 100);
        let res = sliding_window_crop(&img, "q", &ConstantScorer(0.0), &cfg).unwrap();
        assert_eq!(res.trace.len(), 10);
    }

    #[test]
    fn sliding_window_snaps_to_edge() {
        assert_eq!(window_positions(1000, 650, 325), vec![0, 325, 350]);
        assert_eq!(window_positions(1000, 800, 400), vec![0, 200]);
        assert_eq!(window_positions(10, 10, 5), vec![0]);
    }

    #[test]
    fn sliding_window_full_fraction_is_full_image() {
        let cfg = StrategyConfig {
            window_fractions: vec![1.0],
            ..StrategyConfig::default()
        };
        let img = blank(80, 60);
        let res = sliding_window_crop(&img, "q", &ConstantScorer(0.0), &cfg).unwrap();
        assert_eq!(res.trace.len(), 1);
        assert_eq!(res.rect, img.full_rect());
    }

    #[test]
    fn sliding_window_finds_planted_window() {
        let cfg = StrategyConfig {
            window_fractions: vec![0.5],
            ..StrategyConfig::default()
        };
        let img = blank(100, 100);
        let target = r(24, 51, 75, 100);
        let scorer = PlantedTargetScorer::new(target);
        let res = sliding_window_crop(&img, "q", &scorer, &cfg).unwrap();
        let oracle = sliding_windows(100, 100, &cfg)
            .into_iter()
            .chain([img.full_rect()])
            .max_by(|a, b| iou(a, &target).total_cmp(&iou(b, &target)))
            .unwrap();
        assert_eq!(res.rect, oracle);
        assert_eq!(res.rect, r(25, 50, 75, 100));
    }

    #[test]
    fn patchmap_single_hot_cell() {
        let mut v = vec![0.0; 9];
        v[4] = 2.0;
        let sal = FixedSaliency(PatchMap::new(3, 3, v).unwrap());
        let img = blank(300, 300);
        let res = patchmap_crop(&img, "q", &sal, &StrategyConfig::default()).unwrap();
        assert_eq!(res.rect, r(100, 100, 200, 200));
        assert_eq!(res.score, Some(2.0));
    }

    #[test]
    fn patchmap_uniform_is_full_image() {
        let sal = FixedSaliency(PatchMap::new(4, 5, vec![0.3; 20]).unwrap());
        let img = blank(123, 77);
        let res = patchmap_crop(&img, "q", &sal, &StrategyConfig::default()).unwrap();
        assert_eq!(res.rect, img.full_rect());
    }

    #[test]
    fn patchmap_zero_map_is_error() {
        let sal = FixedSaliency(PatchMap::new(2, 2, vec![0.0; 4]).unwrap());
        assert!(matches!(
            patchmap_crop(&blank(10, 10), "q", &sal, &StrategyConfig::default()),
            Err(StrategyError::DegenerateSaliency)
        ));
    }

    /// Brute-force labelling by repeated relaxation, independent of the BFS.
    fn components_oracle(hot: &[bool], rows: usize, cols: usize) -> Vec<usize> {
        let mut label: Vec<usize> = (0..hot.len()).collect();
        loop {
            let mut changed = false;
            for i in 0..hot.len() {
                if !hot[i] {
                    continue;
                }
                let (r, c) = (i / cols, i % cols);
                let mut nbrs = vec![];
                if r > 0 {
                    nbrs.push(i - cols);
                }
                if r + 1 < rows {
                    nbrs.push(i + cols);
                }
                if c > 0 {
                    nbrs.push(i - 1);
                }
                if c + 1 < cols {
                    nbrs.push(i + 1);
                }
                for j in nbrs {
                    if hot[j] && label[j] < label[i] {
                        label[i] = label[j];
                        changed = true;
                    }
                }
            }
            if !changed {
                return label;
            }
        }
    }

    #[test]
    fn patchmap_two_blobs_takes_argmax_blob() {
        #[rustfmt::skip]
        let v = vec![
            0.9, 0.8, 0.0, 0.0, 0.0, 0.0,
            0.7, 0.0, 0.0, 0.0, 0.6, 0.6,
            0.0, 0.0, 0.0, 0.0, 1.0, 0.6,
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        ];
        let (rows, cols) = (4usize, 6usize);
        let pm = PatchMap::new(rows as u32, cols as u32, v.clone()).unwrap();
        let hot: Vec<bool> = v.iter().map(|x| *x >= 0.5).collect();
        let labels = components_oracle(&hot, rows, cols);
        let peak = 2 * cols + 4;
        let members: Vec<usize> = (0..v.len())
            .filter(|&i| hot[i] && labels[i] == labels[peak])
            .collect();
        let c0 = members.iter().map(|i| i % cols).min().unwrap() as u32;
        let c1 = members.iter().map(|i| i % cols).max().unwrap() as u32 + 1;
        let r0 = members.iter().map(|i| i / cols).min().unwrap() as u32;
        let r1 = members.iter().map(|i| i / cols).max().unwrap() as u32 + 1;
        let img = blank(600, 400);
        let expected = patch_to_pixel_rect(&r(c0, r0, c1, r1), &pm, 600, 400).unwrap();
        let res = patchmap_crop(&img, "q", &FixedSaliency(pm), &StrategyConfig::default()).unwrap();
        assert_eq!(res.rect, expected);
        assert_eq!(res.rect, r(400, 100, 600, 300));
        let mean = members.iter().map(|&i| v[i]).sum::<f64>() / members.len() as f64;
        assert_eq!(res.score, Some(mean));
    }

    #[test]
    fn config_validation() {
        assert!(StrategyConfig::default().validate().is_ok());
        let bad = [
            StrategyConfig {
                ratio: 1.0,
                ..StrategyConfig::default()
            },
            StrategyConfig {
                iterations: 0,
                ..StrategyConfig::default()
            },
            StrategyConfig {
                patch_threshold: 0.0,
                ..StrategyConfig::default()
            },
            StrategyConfig {
                window_fractions: vec![],
                ..StrategyConfig::default()
            },
            StrategyConfig {
                window_fractions: vec![1.5],
                ..StrategyConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn run_strategy_requires_backends() {
        let img = blank(10, 10);
        let cfg = StrategyConfig::with_kind(StrategyKind::Iterative);
        assert!(matches!(
            run_strategy(&cfg, &StrategyBackends::default(), &img, "q", None),
            Err(StrategyError::MissingBackend("scorer"))
        ));
        let none = StrategyConfig::with_kind(StrategyKind::None);
        let res = run_strategy(&none, &StrategyBackends::default(), &img, "q", None).unwrap();
        assert_eq!(res.rect, img.full_rect());
    }

    #[test]
    fn strategy_kind_parsing() {
        for k in StrategyKind::ALL {
            assert_eq!(k.as_str().parse::<StrategyKind>().unwrap(), k);
        }
        assert_eq!("sliding-window".parse::<StrategyKind>().unwrap(), StrategyKind::SlidingWindow);
        assert!("zoom".parse::<StrategyKind>().is_err());
    }
}
