//! Model backends: the provider interface, an HTTP implementation, a
//! scripted implementation for fixtures, and the replay cache every call
//! goes through.

mod cache;
mod http;
mod scripted;

use owsgg_core::model::SamplingConfig;
use owsgg_core::ImageRef;
use serde::{Deserialize, Serialize};

pub use cache::{CacheKey, CacheRecord, CachedBackend, Stage, StageCache, StageEncoder, CACHE_FILE};
pub use http::{EmbedProtocol, HttpConfig, HttpProvider};
pub use scripted::{BagOfWordsEmbedder, ScriptedProvider};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("replay cache has no {stage} record for key {key}")]
    ReplayMiss { stage: Stage, key: String },
    #[error("embedding dimensions differ within a batch")]
    DimensionMismatch,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache i/o: {0}")]
    Cache(#[from] std::io::Error),
}

/// One VLM completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub image: Option<ImageRef>,
    pub prompt: String,
    pub sampling: SamplingConfig,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        let s = &self.sampling;
        if !(s.temperature >= 0.0) || !(s.top_p > 0.0 && s.top_p <= 1.0) {
            return Err(BackendError::InvalidRequest("sampling parameters out of range".into()));
        }
        Ok(())
    }
}

/// One single-label detector request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRequest {
    pub image: ImageRef,
    pub label: String,
    pub box_threshold: f64,
    pub text_threshold: f64,
}

impl DetectionRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        owsgg_core::detection::check_detector_label(&self.label)
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.box_threshold) || !unit(self.text_threshold) {
            return Err(BackendError::InvalidRequest("thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Boxes and scores as returned by the detector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionResponse {
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
}

/// Unnormalized depth grid as returned by the depth model.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDepth {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

/// Raw access to the external models. Implementations must be callable
/// from several worker threads at once.
pub trait Provider: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError>;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
    fn detect(&self, req: &DetectionRequest) -> Result<DetectionResponse, BackendError>;
    fn depth(&self, image: &ImageRef) -> Result<RawDepth, BackendError>;
}

/// Scale each vector to unit L2 norm; all vectors must share one dimension.
pub fn unit_normalize(vectors: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>, BackendError> {
    let dim = vectors.first().map(Vec::len).unwrap_or(0);
    vectors
        .into_iter()
        .map(|v| {
            if v.len() != dim || dim == 0 {
                return Err(BackendError::DimensionMismatch);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(BackendError::MalformedResponse("zero or non-finite embedding".into()));
            }
            Ok(v.into_iter().map(|x| x / norm).collect())
        })
        .collect()
}

/// Little-endian `f32` values packed as base64, the depth wire format.
pub fn encode_f32_le(values: &[f32]) -> String {
    use base64::Engine;
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_f32_le(b64: &str) -> Result<Vec<f32>, BackendError> {
    use base64::Engine;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| BackendError::MalformedResponse(format!("values_b64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(BackendError::MalformedResponse("values_b64 length is not a multiple of 4".into()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}
