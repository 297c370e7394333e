//! Protocol conformance checks runnable against any model server.

use std::time::Duration;

use serde::Serialize;
use serde_json::json;

use super::remote::RemoteBackend;
use super::synthetic::{DECOYS, TARGET_RGB};
use super::{
    BackendError, Detector, RelevanceScorer, SaliencySource, Segmenter, VqaModel, VqaQuery,
};
use crate::geometry::{crop_image, Image, Rect};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Pass,
    Fail,
    /// The server reported the capability as not configured (HTTP 501).
    Skip,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub outcome: Outcome,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConformanceReport {
    pub url: String,
    pub checks: Vec<Check>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.outcome != Outcome::Fail)
    }
}

/// A 96x64 image holding a target and both decoys.
pub fn probe_image() -> Image {
    let target = Rect::new(10, 8, 30, 24).unwrap();
    let blue = Rect::new(50, 30, 80, 56).unwrap();
    let green = Rect::new(60, 4, 90, 20).unwrap();
    Image::from_fn(96, 64, |x, y| {
        let px = Rect::new(x, y, x + 1, y + 1).unwrap();
        if target.contains_rect(&px) {
            TARGET_RGB
        } else if blue.contains_rect(&px) {
            DECOYS[0].0
        } else if green.contains_rect(&px) {
            DECOYS[1].0
        } else {
            [((x * 7) % 100 + 60) as u8, ((y * 5) % 100 + 60) as u8, 120]
        }
    })
    .unwrap()
}

fn judge<T>(
    name: &'static str,
    res: Result<T, BackendError>,
    verdict: impl FnOnce(T) -> Result<String, String>,
) -> Check {
    match res {
        Err(BackendError::Unsupported(msg)) => Check {
            name,
            outcome: Outcome::Skip,
            detail: msg,
        },
        Err(e) => Check {
            name,
            outcome: Outcome::Fail,
            detail: e.to_string(),
        },
        Ok(v) => match verdict(v) {
            Ok(detail) => Check {
                name,
                outcome: Outcome::Pass,
                detail,
            },
            Err(detail) => Check {
                name,
                outcome: Outcome::Fail,
                detail,
            },
        },
    }
}

fn in_bounds(boxes: &[Rect], img: &Image) -> bool {
    boxes.iter().all(|b| b.fits_within(img.width(), img.height()))
}

/// Runs every check; connection failure to `/identity` is itself a failed check.
pub fn run_conformance(url: &str, timeout: Duration) -> ConformanceReport {
    let mut checks = Vec::new();
    let backend = match RemoteBackend::connect(url, timeout) {
        Ok(b) => {
            checks.push(Check {
                name: "identity",
                outcome: Outcome::Pass,
                detail: super::Identified::identity(&b).to_string(),
            });
            b
        }
        Err(e) => {
            checks.push(Check {
                name: "identity",
                outcome: Outcome::Fail,
                detail: e.to_string(),
            });
            return ConformanceReport {
                url: url.to_string(),
                checks,
            };
        }
    };
    let img = probe_image();
    let question = "what is inside the red box?";

    let twice = backend
        .score(&img, question)
        .and_then(|a| backend.score(&img, question).map(|b| (a, b)));
    checks.push(judge("score-deterministic", twice, |(a, b)| {
        if a.is_finite() && a.to_bits() == b.to_bits() {
            Ok(format!("score {a}"))
        } else {
            Err(format!("scores differ or are not finite: {a} vs {b}"))
        }
    }));

    checks.push(judge(
        "detect-threshold",
        backend.detect(&img, 0.25),
        |dets| {
            if dets.iter().any(|d| d.confidence < 0.25) {
                Err(format!("detection below 0.25: {dets:?}"))
            } else if !in_bounds(&dets.iter().map(|d| d.rect).collect::<Vec<_>>(), &img) {
                Err("detection box outside the image".into())
            } else {
                Ok(format!("{} detections", dets.len()))
            }
        },
    ));

    checks.push(judge("segment-in-bounds", backend.segment(&img), |boxes| {
        if in_bounds(&boxes, &img) {
            Ok(format!("{} boxes", boxes.len()))
        } else {
            Err(format!("box outside the image: {boxes:?}"))
        }
    }));

    let crop = crop_image(&img, &Rect::new(0, 0, 48, 32).unwrap()).unwrap();
    let query = VqaQuery {
        question_id: "conformance",
        question,
        images: vec![&img, &crop],
        crop: None,
    };
    checks.push(judge("vqa-two-images", backend.answer(&query), |a| {
        Ok(format!("answer {:?}", a.answer))
    }));

    checks.push(judge(
        "saliency-grid",
        backend.saliency(&img, question),
        |pm| Ok(format!("{}x{} grid", pm.rows(), pm.cols())),
    ));

    checks.push(malformed_payload_check(url, timeout));

    ConformanceReport {
        url: url.to_string(),
        checks,
    }
}

fn malformed_payload_check(url: &str, timeout: Duration) -> Check {
    let agent = ureq::AgentBuilder::new().timeout(timeout).build();
    let res = agent
        .post(&format!("{}/score", url.trim_end_matches('/')))
        .set("Content-Type", "application/json")
        .send_string(&json!({"text": 3}).to_string());
    let (outcome, detail) = match res {
        Err(ureq::Error::Status(400, _)) => (Outcome::Pass, "400 on malformed /score".into()),
        Err(ureq::Error::Status(501, _)) => (Outcome::Skip, "scorer not configured".into()),
        Err(ureq::Error::Status(s, _)) => (Outcome::Fail, format!("expected 400, got {s}")),
        Ok(r) => (Outcome::Fail, format!("expected 400, got {}", r.status())),
        Err(e) => (Outcome::Fail, e.to_string()),
    };
    Check {
        name: "malformed-payload",
        outcome,
        detail,
    }
}
