//! Blocking HTTP client for the model-server protocol.

use std::io;
use std::time::Duration;

use log::warn;
use serde::Serialize;
use serde_json::Value;

use super::wire::{self, encode_image};
use super::{
    validate_boxes, validate_detections, BackendError, BackendIdentity, Detection, Detector,
    Identified, RelevanceScorer, SaliencySource, Segmenter, VqaAnswer, VqaModel, VqaQuery,
};
use crate::geometry::{crop_image, Image, PatchMap, Rect};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// One model server. Implements every capability trait; calls to a route
/// the server does not provide fail with [`BackendError::Unsupported`].
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    base_url: String,
    agent: ureq::Agent,
    identity: BackendIdentity,
    retries: u32,
}

impl RemoteBackend {
    /// Connects and fetches `/identity`, which becomes part of every cache key.
    pub fn connect(base_url: &str, timeout: Duration) -> Result<Self, BackendError> {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(timeout)
            .timeout(timeout)
            .build();
        let mut backend = Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            agent,
            identity: BackendIdentity::new("unresolved", "0"),
            retries: 1,
        };
        let v = backend.with_retry(|| backend.get(wire::ROUTE_IDENTITY))?;
        backend.identity = wire::parse_identity(&v)?;
        Ok(backend)
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn url(&self, route: &str) -> String {
        format!("{}{}", self.base_url, route)
    }

    fn get(&self, route: &str) -> Result<Value, BackendError> {
        read_response(self.agent.get(&self.url(route)).call())
    }

    fn post<B: Serialize>(&self, route: &str, body: &B) -> Result<Value, BackendError> {
        let body = serde_json::to_string(body).map_err(|e| BackendError::Failed(e.to_string()))?;
        self.with_retry(|| {
            read_response(
                self.agent
                    .post(&self.url(route))
                    .set("Content-Type", "application/json")
                    .send_string(&body),
            )
        })
    }

    fn with_retry<T>(
        &self,
        mut call: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            match call() {
                Err(e) if e.is_transient() && attempt < self.retries => {
                    warn!("{}: {e}; retrying", self.base_url);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn is_timeout(err: &(dyn std::error::Error + 'static)) -> bool {
    let mut cur = Some(err);
    while let Some(e) = cur {
        if let Some(io) = e.downcast_ref::<io::Error>() {
            if matches!(io.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock) {
                return true;
            }
        }
        cur = e.source();
    }
    false
}

fn read_response(res: Result<ureq::Response, ureq::Error>) -> Result<Value, BackendError> {
    match res {
        Ok(resp) => {
            let text = resp
                .into_string()
                .map_err(|e| classify_io(&e, "reading response"))?;
            serde_json::from_str(&text)
                .map_err(|e| BackendError::Protocol(format!("response is not JSON: {e}")))
        }
        Err(ureq::Error::Status(501, resp)) => Err(BackendError::Unsupported(
            resp.into_string().unwrap_or_default(),
        )),
        Err(ureq::Error::Status(status, resp)) => Err(BackendError::Http {
            status,
            body: resp.into_string().unwrap_or_default(),
        }),
        Err(ureq::Error::Transport(t)) => {
            if is_timeout(&t) || t.to_string().contains("timed out") {
                Err(BackendError::Timeout(t.to_string()))
            } else {
                Err(BackendError::Transport(t.to_string()))
            }
        }
    }
}

fn classify_io(e: &io::Error, ctx: &str) -> BackendError {
    if matches!(e.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock) {
        BackendError::Timeout(format!("{ctx}: {e}"))
    } else {
        BackendError::Transport(format!("{ctx}: {e}"))
    }
}

impl Identified for RemoteBackend {
    fn identity(&self) -> BackendIdentity {
        self.identity.clone()
    }
}

impl RelevanceScorer for RemoteBackend {
    fn score_region(&self, image: &Image, region: &Rect, text: &str) -> Result<f64, BackendError> {
        let encoded = if *region == image.full_rect() {
            encode_image(image)?
        } else {
            encode_image(&crop_image(image, region)?)?
        };
        let v = self.post(
            wire::ROUTE_SCORE,
            &wire::ScoreRequest {
                image: encoded,
                text: text.to_string(),
            },
        )?;
        wire::parse_score(&v)
    }
}

impl Detector for RemoteBackend {
    fn detect(&self, image: &Image, threshold: f64) -> Result<Vec<Detection>, BackendError> {
        let v = self.post(
            wire::ROUTE_DETECT,
            &wire::DetectRequest {
                image: encode_image(image)?,
                conf: threshold,
            },
        )?;
        let detections = wire::parse_detections(&v)?;
        validate_detections(&detections, image, threshold)?;
        Ok(detections)
    }
}

impl Segmenter for RemoteBackend {
    fn segment(&self, image: &Image) -> Result<Vec<Rect>, BackendError> {
        let v = self.post(
            wire::ROUTE_SEGMENT,
            &wire::SegmentRequest {
                image: encode_image(image)?,
            },
        )?;
        let boxes = wire::parse_boxes(&v)?;
        validate_boxes(&boxes, image)?;
        Ok(boxes)
    }
}

impl VqaModel for RemoteBackend {
    fn answer(&self, query: &VqaQuery<'_>) -> Result<VqaAnswer, BackendError> {
        if query.images.is_empty() {
            return Err(BackendError::Failed("no image supplied".into()));
        }
        let images = query
            .images
            .iter()
            .map(|img| encode_image(img))
            .collect::<Result<Vec<_>, _>>()?;
        let v = self.post(
            wire::ROUTE_VQA,
            &wire::VqaRequest {
                images,
                question: query.question.to_string(),
            },
        )?;
        wire::parse_answer(&v)
    }
}

impl SaliencySource for RemoteBackend {
    fn saliency(&self, image: &Image, question: &str) -> Result<PatchMap, BackendError> {
        let v = self.post(
            wire::ROUTE_SALIENCY,
            &wire::SaliencyRequest {
                image: encode_image(image)?,
                question: question.to_string(),
            },
        )?;
        wire::parse_patch_map(&v)
    }
}
