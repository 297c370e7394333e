//! On-disk memo of backend responses.
//!
//! Keys hash `(capability, backend identity, image content hashes, region,
//! text)`; values are the JSON encoding of the typed response. The file is
//! append-only JSON lines, so a killed run keeps everything it finished.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backends::{
    BackendError, BackendIdentity, Detection, Detector, Identified, RelevanceScorer,
    SaliencySource, Segmenter, VqaAnswer, VqaModel, VqaQuery,
};
use crate::geometry::{Image, PatchMap, Rect};

pub const CACHE_FILE: &str = "responses.jsonl";

#[derive(Serialize, Deserialize)]
struct Line {
    k: String,
    v: Value,
}

#[derive(Default)]
pub struct ScoreCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, Value>>,
    writer: Mutex<Option<BufWriter<File>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl std::fmt::Debug for ScoreCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScoreCache")
            .field("path", &self.path)
            .field("entries", &self.len())
            .finish()
    }
}

/// Builds a cache key from its parts.
pub fn cache_key(
    capability: &str,
    identity: &BackendIdentity,
    images: &[&Image],
    region: Option<&Rect>,
    text: &str,
) -> String {
    let mut h = Sha256::new();
    h.update(capability.as_bytes());
    h.update([0]);
    h.update(identity.to_string().as_bytes());
    h.update([0]);
    for img in images {
        h.update(img.content_hash().0);
    }
    h.update([0]);
    if let Some(r) = region {
        for c in r.to_array() {
            h.update(c.to_le_bytes());
        }
    }
    h.update([0]);
    h.update(Sha256::digest(text.as_bytes()));
    hex::encode(h.finalize())
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) `dir/responses.jsonl`. A torn trailing line from
    /// an interrupted run is ignored.
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(CACHE_FILE);
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                if let Ok(Line { k, v }) = serde_json::from_str::<Line>(&line?) {
                    entries.insert(k, v);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path: Some(path),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(BufWriter::new(file))),
            ..Self::default()
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn get_or_compute<T: Serialize + DeserializeOwned>(
        &self,
        key: String,
        compute: impl FnOnce() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let cached = self.entries.read().unwrap().get(&key).cloned();
        if let Some(v) = cached {
            if let Ok(t) = serde_json::from_value(v) {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(t);
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let value = compute()?;
        let json = serde_json::to_value(&value)
            .map_err(|e| BackendError::Failed(format!("cache encode: {e}")))?;
        if let Some(w) = self.writer.lock().unwrap().as_mut() {
            let line = serde_json::to_string(&Line {
                k: key.clone(),
                v: json.clone(),
            })
            .map_err(|e| BackendError::Failed(format!("cache encode: {e}")))?;
            // A failed cache write only costs a recomputation later.
            let _ = writeln!(w, "{line}").and_then(|_| w.flush());
        }
        self.entries.write().unwrap().insert(key, json);
        Ok(value)
    }
}

pub struct CachedScorer {
    pub inner: Arc<dyn RelevanceScorer>,
    pub cache: Arc<ScoreCache>,
}

impl Identified for CachedScorer {
    fn identity(&self) -> BackendIdentity {
        self.inner.identity()
    }
}

impl RelevanceScorer for CachedScorer {
    fn score_region(&self, image: &Image, region: &Rect, text: &str) -> Result<f64, BackendError> {
        let key = cache_key("score", &self.inner.identity(), &[image], Some(region), text);
        self.cache
            .get_or_compute(key, || self.inner.score_region(image, region, text))
    }
}

pub struct CachedDetector {
    pub inner: Arc<dyn Detector>,
    pub cache: Arc<ScoreCache>,
}

impl Identified for CachedDetector {
    fn identity(&self) -> BackendIdentity {
        self.inner.identity()
    }
}

impl Detector for CachedDetector {
    fn detect(&self, image: &Image, threshold: f64) -> Result<Vec<Detection>, BackendError> {
        let key = cache_key(
            "detect",
            &self.inner.identity(),
            &[image],
            None,
            &threshold.to_bits().to_string(),
        );
        self.cache.get_or_compute(key, || self.inner.detect(image, threshold))
    }
}

pub struct CachedSegmenter {
    pub inner: Arc<dyn Segmenter>,
    pub cache: Arc<ScoreCache>,
}

impl Identified for CachedSegmenter {
    fn identity(&self) -> BackendIdentity {
        self.inner.identity()
    }
}

impl Segmenter for CachedSegmenter {
    fn segment(&self, image: &Image) -> Result<Vec<Rect>, BackendError> {
        let key = cache_key("segment", &self.inner.identity(), &[image], None, "");
        self.cache.get_or_compute(key, || self.inner.segment(image))
    }
}

pub struct CachedSaliency {
    pub inner: Arc<dyn SaliencySource>,
    pub cache: Arc<ScoreCache>,
}

impl Identified for CachedSaliency {
    fn identity(&self) -> BackendIdentity {
        self.inner.identity()
    }
}

impl SaliencySource for CachedSaliency {
    fn saliency(&self, image: &Image, question: &str) -> Result<PatchMap, BackendError> {
        let key = cache_key("saliency", &self.inner.identity(), &[image], None, question);
        self.cache
            .get_or_compute(key, || self.inner.saliency(image, question))
    }
}

pub struct CachedVqa {
    pub inner: Arc<dyn VqaModel>,
    pub cache: Arc<ScoreCache>,
}

impl Identified for CachedVqa {
    fn identity(&self) -> BackendIdentity {
        self.inner.identity()
    }
}

impl VqaModel for CachedVqa {
    fn answer(&self, query: &VqaQuery<'_>) -> Result<VqaAnswer, BackendError> {
        // The question id and crop rect are part of the key: in-process
        // models may use them, remote ones ignore them.
        let text = format!("{}\u{0}{}", query.question_id, query.question);
        let key = cache_key(
            "vqa",
            &self.inner.identity(),
            &query.images,
            query.crop.as_ref(),
            &text,
        );
        self.cache.get_or_compute(key, || self.inner.answer(query))
    }
}
