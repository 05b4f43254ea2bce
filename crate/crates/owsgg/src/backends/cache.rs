use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use owsgg_core::detection::RawDetection;
use owsgg_core::mapping::TextEncoder;
use owsgg_core::model::ModelsConfig;
use owsgg_core::{DepthMap, ImageRef};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{decode_f32_le, encode_f32_le, unit_normalize, BackendError, ChatRequest, DetectionRequest, Provider};

/// File name of the backend record log inside a cache directory.
pub const CACHE_FILE: &str = "backend.jsonl";

/// Pipeline stage, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Entities,
    Map,
    Detect,
    Refine,
    Relate,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Entities, Stage::Map, Stage::Detect, Stage::Refine, Stage::Relate, Stage::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Entities => "entities",
            Stage::Map => "map",
            Stage::Detect => "detect",
            Stage::Refine => "refine",
            Stage::Relate => "relate",
            Stage::Eval => "eval",
        }
    }

    pub fn previous(self) -> Option<Stage> {
        let i = Stage::ALL.iter().position(|s| *s == self)?;
        i.checked_sub(1).map(|p| Stage::ALL[p])
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Content hash of one backend request.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub stage: Stage,
    pub content_hash: String,
}

impl CacheKey {
    /// Hash of the canonical JSON of `(stage, operation, model, request,
    /// attempt)`. Object keys are sorted, so field order never matters.
    pub fn new(stage: Stage, op: &str, model: &str, request: &Value, attempt: u32) -> Self {
        let doc = json!({
            "stage": stage,
            "op": op,
            "model": model,
            "request": request,
            "attempt": attempt,
        });
        let digest = Sha256::digest(doc.to_string().as_bytes());
        CacheKey { stage, content_hash: hex::encode(digest) }
    }
}

/// One line of the cache log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub stage: Stage,
    pub request: Value,
    pub response: Value,
    pub timestamp: u64,
}

struct Inner {
    entries: HashMap<String, Value>,
    file: File,
}

/// Append-only JSON-Lines store of backend responses. The first record for
/// a key wins; the in-memory insert and the file append happen under one
/// lock so readers never see a response that is not on disk.
pub struct StageCache {
    path: PathBuf,
    inner: Mutex<Inner>,
}

impl StageCache {
    /// Open (or create) `dir/backend.jsonl`. Lines that do not parse, such
    /// as a record cut short by a crash, are skipped.
    pub fn open(dir: &Path) -> Result<Self, BackendError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(CACHE_FILE);
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for line in reader.lines() {
                let line = line?;
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(rec) => {
                        entries.entry(rec.key).or_insert(rec.response);
                    }
                    Err(_) if line.trim().is_empty() => {}
                    Err(e) => log::warn!("skipping unreadable cache line in {}: {e}", path.display()),
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        // a torn final line must not swallow the next record
        let len = file.metadata()?.len();
        if len > 0 && !ends_with_newline(&path)? {
            file.write_all(b"\n")?;
        }
        Ok(StageCache { path, inner: Mutex::new(Inner { entries, file }) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<Value> {
        self.inner.lock().expect("cache lock").entries.get(&key.content_hash).cloned()
    }

    /// Store a response unless the key is already present; returns the
    /// response that is now authoritative for the key.
    pub fn put(&self, key: &CacheKey, request: Value, response: Value) -> Result<Value, BackendError> {
        let mut inner = self.inner.lock().expect("cache lock");
        if let Some(existing) = inner.entries.get(&key.content_hash) {
            return Ok(existing.clone());
        }
        let record = CacheRecord {
            key: key.content_hash.clone(),
            stage: key.stage,
            request,
            response: response.clone(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let mut line = serde_json::to_string(&record).expect("cache record serializes");
        line.push('\n');
        inner.file.write_all(line.as_bytes())?;
        inner.file.flush()?;
        inner.entries.insert(key.content_hash.clone(), response.clone());
        Ok(response)
    }
}

fn ends_with_newline(path: &Path) -> std::io::Result<bool> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = File::open(path)?;
    f.seek(SeekFrom::End(-1))?;
    let mut b = [0u8; 1];
    f.read_exact(&mut b)?;
    Ok(b[0] == b'\n')
}

/// Every backend call of the pipeline, answered from the cache when
/// possible. Without a provider (replay mode) a cache miss is an error.
pub struct CachedBackend {
    provider: Option<Arc<dyn Provider>>,
    cache: Arc<StageCache>,
    models: ModelsConfig,
    live_calls: AtomicUsize,
}

impl CachedBackend {
    pub fn live(provider: Arc<dyn Provider>, cache: Arc<StageCache>, models: ModelsConfig) -> Self {
        CachedBackend { provider: Some(provider), cache, models, live_calls: AtomicUsize::new(0) }
    }

    pub fn replay(cache: Arc<StageCache>, models: ModelsConfig) -> Self {
        CachedBackend { provider: None, cache, models, live_calls: AtomicUsize::new(0) }
    }

    /// Number of requests that reached the provider.
    pub fn live_calls(&self) -> usize {
        self.live_calls.load(Ordering::SeqCst)
    }

    pub fn models(&self) -> &ModelsConfig {
        &self.models
    }

    pub fn cache(&self) -> &StageCache {
        &self.cache
    }

    fn through<T: Serialize + DeserializeOwned>(
        &self,
        key: CacheKey,
        request: Value,
        call: impl FnOnce(&dyn Provider) -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        if let Some(hit) = self.cache.get(&key) {
            return serde_json::from_value(hit)
                .map_err(|e| BackendError::MalformedResponse(format!("cached {} record: {e}", key.stage)));
        }
        let Some(provider) = &self.provider else {
            return Err(BackendError::ReplayMiss { stage: key.stage, key: key.content_hash });
        };
        self.live_calls.fetch_add(1, Ordering::SeqCst);
        let response = call(provider.as_ref())?;
        let stored = self.cache.put(&key, request, serde_json::to_value(&response).expect("response serializes"))?;
        serde_json::from_value(stored).map_err(|e| BackendError::MalformedResponse(e.to_string()))
    }

    /// Chat completion. `attempt` distinguishes deliberate retries of the
    /// same prompt so each retry gets its own record.
    pub fn chat(&self, stage: Stage, req: &ChatRequest, attempt: u32) -> Result<String, BackendError> {
        req.validate()?;
        let request = serde_json::to_value(req).expect("request serializes");
        let key = CacheKey::new(stage, "chat", &self.models.chat, &request, attempt);
        self.through(key, request, |p| p.chat(req))
    }

    /// Unit-norm embeddings, one per text.
    pub fn embed(&self, stage: Stage, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::InvalidRequest("no texts to embed".into()));
        }
        let request = json!({ "texts": texts });
        let key = CacheKey::new(stage, "embed", &self.models.embed, &request, 0);
        let vectors: Vec<Vec<f64>> = self.through(key, request, |p| {
            let v = p.embed(texts)?;
            if v.len() != texts.len() {
                return Err(BackendError::MalformedResponse(format!("{} vectors for {} texts", v.len(), texts.len())));
            }
            unit_normalize(v)
        })?;
        if vectors.len() != texts.len() {
            return Err(BackendError::MalformedResponse("cached embedding count differs from request".into()));
        }
        Ok(vectors)
    }

    /// Detections for one label; anything under `box_threshold` is dropped
    /// whatever the backend returned.
    pub fn detect(&self, req: &DetectionRequest) -> Result<Vec<RawDetection>, BackendError> {
        req.validate()?;
        let request = serde_json::to_value(req).expect("request serializes");
        let key = CacheKey::new(Stage::Detect, "detect", &self.models.detect, &request, 0);
        let resp: super::DetectionResponse = self.through(key, request, |p| p.detect(req))?;
        if resp.boxes.len() != resp.scores.len() {
            return Err(BackendError::MalformedResponse("boxes and scores differ in length".into()));
        }
        Ok(resp
            .boxes
            .into_iter()
            .zip(resp.scores)
            .filter(|(_, s)| *s >= req.box_threshold)
            .map(|(bbox, score)| RawDetection { bbox, score })
            .collect())
    }

    /// Min-max normalized depth map of the image.
    pub fn depth(&self, image: &ImageRef) -> Result<DepthMap, BackendError> {
        let request = serde_json::to_value(image).expect("image serializes");
        let key = CacheKey::new(Stage::Refine, "depth", &self.models.depth, &request, 0);
        let wire: DepthWire = self.through(key, request, |p| {
            let raw = p.depth(image)?;
            Ok(DepthWire { width: raw.width, height: raw.height, values_b64: encode_f32_le(&raw.values) })
        })?;
        let values = decode_f32_le(&wire.values_b64)?;
        DepthMap::from_raw(image, wire.width, wire.height, values)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))
    }
}

/// [`TextEncoder`] view of a backend, tagged with the calling stage.
pub struct StageEncoder<'a> {
    pub backend: &'a CachedBackend,
    pub stage: Stage,
}

impl TextEncoder for StageEncoder<'_> {
    type Error = BackendError;

    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        self.backend.embed(self.stage, texts)
    }
}

/// Depth response as stored in the cache (and as sent by the shim).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct DepthWire {
    pub width: u32,
    pub height: u32,
    pub values_b64: String,
}
