//! Serves in-process backends over the model-server protocol.
//!
//! Used as the stub server for protocol tests and by `crop-vqa serve-stub`.
//! Unconfigured capabilities answer 501, malformed payloads 400 and backend
//! failures 500 with `{"error": ...}`.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use log::debug;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tiny_http::{Header, Method, Response, Server};

use super::wire::{self, decode_image};
use super::{
    BackendError, BackendIdentity, Detector, RelevanceScorer, SaliencySource, Segmenter,
    VqaModel, VqaQuery,
};

#[derive(Clone, Default)]
pub struct ServedBackends {
    pub scorer: Option<Arc<dyn RelevanceScorer>>,
    pub detector: Option<Arc<dyn Detector>>,
    pub segmenter: Option<Arc<dyn Segmenter>>,
    pub vqa: Option<Arc<dyn VqaModel>>,
    pub saliency: Option<Arc<dyn SaliencySource>>,
}

pub struct ServerHandle {
    addr: SocketAddr,
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
    requests: Arc<AtomicU64>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// POST requests handled so far.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves on `threads` workers.
pub fn serve(
    addr: &str,
    backends: ServedBackends,
    identity: BackendIdentity,
    threads: usize,
) -> std::io::Result<ServerHandle> {
    let server = Arc::new(Server::http(addr).map_err(std::io::Error::other)?);
    let local = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| std::io::Error::other("server is not bound to an IP address"))?;
    let backends = Arc::new(backends);
    let identity = Arc::new(identity);
    let requests = Arc::new(AtomicU64::new(0));
    let workers = (0..threads.max(1))
        .map(|_| {
            let server = Arc::clone(&server);
            let backends = Arc::clone(&backends);
            let identity = Arc::clone(&identity);
            let requests = Arc::clone(&requests);
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    if *req.method() == Method::Post {
                        requests.fetch_add(1, Ordering::SeqCst);
                    }
                    let mut body = String::new();
                    let (status, payload) = match req.as_reader().read_to_string(&mut body) {
                        Ok(_) => route(req.method(), req.url(), &body, &backends, &identity),
                        Err(e) => (400, json!({"error": format!("unreadable body: {e}")})),
                    };
                    debug!("{} {} -> {status}", req.method(), req.url());
                    let header = Header::from_bytes("Content-Type", "application/json")
                        .expect("static header");
                    let resp = Response::from_string(payload.to_string())
                        .with_status_code(status)
                        .with_header(header);
                    let _ = req.respond(resp);
                }
            })
        })
        .collect();
    Ok(ServerHandle {
        addr: local,
        server,
        workers,
        requests,
    })
}

fn parse_body<T: DeserializeOwned>(body: &str) -> Result<T, (u16, Value)> {
    serde_json::from_str(body).map_err(|e| (400, json!({"error": format!("malformed payload: {e}")})))
}

fn backend_failure(e: BackendError) -> (u16, Value) {
    let status = match e {
        BackendError::Protocol(_) | BackendError::Geometry(_) => 400,
        BackendError::Unsupported(_) => 501,
        _ => 500,
    };
    (status, json!({"error": e.to_string()}))
}

fn missing(cap: &str) -> (u16, Value) {
    (501, json!({"error": format!("{cap} not configured")}))
}

fn route(
    method: &Method,
    url: &str,
    body: &str,
    b: &ServedBackends,
    identity: &BackendIdentity,
) -> (u16, Value) {
    let result = match (method, url) {
        (Method::Get, wire::ROUTE_IDENTITY) => Ok(json!(identity)),
        (Method::Post, wire::ROUTE_SCORE) => handle_score(body, b),
        (Method::Post, wire::ROUTE_DETECT) => handle_detect(body, b),
        (Method::Post, wire::ROUTE_SEGMENT) => handle_segment(body, b),
        (Method::Post, wire::ROUTE_VQA) => handle_vqa(body, b),
        (Method::Post, wire::ROUTE_SALIENCY) => handle_saliency(body, b),
        _ => Err((404, json!({"error": format!("no route {method} {url}")}))),
    };
    match result {
        Ok(v) => (200, v),
        Err(e) => e,
    }
}

fn handle_score(body: &str, b: &ServedBackends) -> Result<Value, (u16, Value)> {
    let scorer = b.scorer.as_ref().ok_or_else(|| missing("scorer"))?;
    let req: wire::ScoreRequest = parse_body(body)?;
    let img = decode_image(&req.image).map_err(backend_failure)?;
    let score = scorer.score(&img, &req.text).map_err(backend_failure)?;
    Ok(json!({ "score": score }))
}

fn handle_detect(body: &str, b: &ServedBackends) -> Result<Value, (u16, Value)> {
    let det = b.detector.as_ref().ok_or_else(|| missing("detector"))?;
    let req: wire::DetectRequest = parse_body(body)?;
    let img = decode_image(&req.image).map_err(backend_failure)?;
    let detections = det.detect(&img, req.conf).map_err(backend_failure)?;
    Ok(json!({ "detections": detections }))
}

fn handle_segment(body: &str, b: &ServedBackends) -> Result<Value, (u16, Value)> {
    let seg = b.segmenter.as_ref().ok_or_else(|| missing("segmenter"))?;
    let req: wire::SegmentRequest = parse_body(body)?;
    let img = decode_image(&req.image).map_err(backend_failure)?;
    let boxes = seg.segment(&img).map_err(backend_failure)?;
    Ok(json!({ "boxes": boxes }))
}

fn handle_vqa(body: &str, b: &ServedBackends) -> Result<Value, (u16, Value)> {
    let vqa = b.vqa.as_ref().ok_or_else(|| missing("vqa"))?;
    let req: wire::VqaRequest = parse_body(body)?;
    if req.images.is_empty() {
        return Err((400, json!({"error": "at least one image is required"})));
    }
    let images = req
        .images
        .iter()
        .map(|s| decode_image(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(backend_failure)?;
    let query = VqaQuery {
        question_id: "",
        question: &req.question,
        images: images.iter().collect(),
        crop: None,
    };
    let ans = vqa.answer(&query).map_err(backend_failure)?;
    Ok(json!(ans))
}

fn handle_saliency(body: &str, b: &ServedBackends) -> Result<Value, (u16, Value)> {
    let sal = b.saliency.as_ref().ok_or_else(|| missing("saliency"))?;
    let req: wire::SaliencyRequest = parse_body(body)?;
    let img = decode_image(&req.image).map_err(backend_failure)?;
    let pm = sal.saliency(&img, &req.question).map_err(backend_failure)?;
    Ok(json!(pm))
}
