//! The seam between the deterministic core and neural inference.
//!
//! Every model capability is a trait. Implementations are either in-process
//! synthetic oracles ([`synthetic`]) or a client for an external model server
//! speaking the JSON-over-HTTP protocol in [`wire`] ([`remote`]). The
//! [`server`] module serves any set of in-process backends over that same
//! protocol, and [`conformance`] checks a server against it.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::{GeometryError, Image, PatchMap, Rect};

pub mod conformance;
pub mod remote;
pub mod server;
pub mod synthetic;
pub mod wire;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("server returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("capability not provided: {0}")]
    Unsupported(String),
    #[error("backend failure: {0}")]
    Failed(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl BackendError {
    /// Errors worth one retry: the request may never have reached the model.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::Timeout(_))
    }
}

/// Names a backend for cache keys. Two backends with equal identities must
/// produce equal outputs for equal inputs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackendIdentity {
    pub name: String,
    pub version: String,
}

impl BackendIdentity {
    pub fn new(name: impl Into<String>, version: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            version: version.into(),
        }
    }
}

impl fmt::Display for BackendIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, self.version)
    }
}

pub trait Identified {
    fn identity(&self) -> BackendIdentity;
}

/// Image-text relevance, higher is more relevant. Scores are only ever
/// compared against other scores from the same backend identity.
pub trait RelevanceScorer: Identified + Send + Sync {
    /// Scores the `region` of `image` against `text`. Remote scorers see only
    /// the cropped pixels; in-process oracles may use the region directly.
    fn score_region(&self, image: &Image, region: &Rect, text: &str) -> Result<f64, BackendError>;

    fn score(&self, image: &Image, text: &str) -> Result<f64, BackendError> {
        self.score_region(image, &image.full_rect(), text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub rect: Rect,
    #[serde(rename = "conf")]
    pub confidence: f64,
    #[serde(rename = "label")]
    pub class_label: String,
}

pub trait Detector: Identified + Send + Sync {
    /// Every returned detection has `confidence >= confidence_threshold`.
    fn detect(&self, image: &Image, confidence_threshold: f64)
        -> Result<Vec<Detection>, BackendError>;
}

pub trait Segmenter: Identified + Send + Sync {
    /// Covering boxes of the segmentation masks, all inside the image.
    fn segment(&self, image: &Image) -> Result<Vec<Rect>, BackendError>;
}

/// One VQA request. With two images the order is (original, crop).
#[derive(Debug, Clone)]
pub struct VqaQuery<'a> {
    pub question_id: &'a str,
    pub question: &'a str,
    pub images: Vec<&'a Image>,
    /// Where the crop came from in the original image, when there is one.
    /// Not sent over the wire.
    pub crop: Option<Rect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaAnswer {
    pub answer: String,
    pub answer_score: Option<f64>,
}

pub trait VqaModel: Identified + Send + Sync {
    fn answer(&self, query: &VqaQuery<'_>) -> Result<VqaAnswer, BackendError>;
}

pub trait SaliencySource: Identified + Send + Sync {
    /// Grid dimensions are fixed per backend identity.
    fn saliency(&self, image: &Image, question: &str) -> Result<PatchMap, BackendError>;
}

/// Checks the detection postconditions against a source image.
pub fn validate_detections(
    detections: &[Detection],
    image: &Image,
    threshold: f64,
) -> Result<(), BackendError> {
    for d in detections {
        if !d.rect.fits_within(image.width(), image.height()) {
            return Err(BackendError::Protocol(format!(
                "detection box {} outside {}x{} image",
                d.rect,
                image.width(),
                image.height()
            )));
        }
        if !(0.0..=1.0).contains(&d.confidence) || d.confidence < threshold {
            return Err(BackendError::Protocol(format!(
                "detection confidence {} violates threshold {threshold}",
                d.confidence
            )));
        }
    }
    Ok(())
}

pub fn validate_boxes(boxes: &[Rect], image: &Image) -> Result<(), BackendError> {
    match boxes
        .iter()
        .find(|b| !b.fits_within(image.width(), image.height()))
    {
        Some(b) => Err(BackendError::Protocol(format!(
            "box {b} outside {}x{} image",
            image.width(),
            image.height()
        ))),
        None => Ok(()),
    }
}
