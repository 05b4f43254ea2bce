use std::sync::atomic::{AtomicUsize, Ordering};

use owsgg_core::ImageRef;
use sha2::{Digest, Sha256};

use super::{BackendError, ChatRequest, DetectionRequest, DetectionResponse, Provider, RawDepth};

type ChatFn = Box<dyn Fn(&ChatRequest) -> String + Send + Sync>;
type EmbedFn = Box<dyn Fn(&[String]) -> Vec<Vec<f64>> + Send + Sync>;
type DetectFn = Box<dyn Fn(&DetectionRequest) -> DetectionResponse + Send + Sync>;
type DepthFn = Box<dyn Fn(&ImageRef) -> RawDepth + Send + Sync>;

/// Provider answering from closures. Used to record fixtures and in tests;
/// an operation without a closure reports `BackendUnavailable`.
#[derive(Default)]
pub struct ScriptedProvider {
    chat: Option<ChatFn>,
    embed: Option<EmbedFn>,
    detect: Option<DetectFn>,
    depth: Option<DepthFn>,
    calls: AtomicUsize,
}

impl ScriptedProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_chat(mut self, f: impl Fn(&ChatRequest) -> String + Send + Sync + 'static) -> Self {
        self.chat = Some(Box::new(f));
        self
    }

    pub fn with_embed(mut self, f: impl Fn(&[String]) -> Vec<Vec<f64>> + Send + Sync + 'static) -> Self {
        self.embed = Some(Box::new(f));
        self
    }

    pub fn with_detect(mut self, f: impl Fn(&DetectionRequest) -> DetectionResponse + Send + Sync + 'static) -> Self {
        self.detect = Some(Box::new(f));
        self
    }

    pub fn with_depth(mut self, f: impl Fn(&ImageRef) -> RawDepth + Send + Sync + 'static) -> Self {
        self.depth = Some(Box::new(f));
        self
    }

    /// Total calls received, across all operations.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn pick<'a, F: ?Sized>(&self, f: &'a Option<Box<F>>, what: &str) -> Result<&'a F, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        f.as_deref().ok_or_else(|| BackendError::BackendUnavailable(format!("no scripted {what}")))
    }
}

impl Provider for ScriptedProvider {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        Ok(self.pick(&self.chat, "chat")?(req))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(self.pick(&self.embed, "embed")?(texts))
    }

    fn detect(&self, req: &DetectionRequest) -> Result<DetectionResponse, BackendError> {
        Ok(self.pick(&self.detect, "detect")?(req))
    }

    fn depth(&self, image: &ImageRef) -> Result<RawDepth, BackendError> {
        Ok(self.pick(&self.depth, "depth")?(image))
    }
}

/// Deterministic hashed bag-of-words sentence encoder. Sentences sharing
/// more words have higher cosine; a constant component keeps every vector
/// non-zero.
#[derive(Debug, Clone, Copy)]
pub struct BagOfWordsEmbedder {
    pub dim: usize,
}

impl Default for BagOfWordsEmbedder {
    fn default() -> Self {
        BagOfWordsEmbedder { dim: 256 }
    }
}

impl BagOfWordsEmbedder {
    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim.max(2)];
        v[0] = 0.1;
        for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let digest = Sha256::digest(word.to_lowercase().as_bytes());
            let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) as usize;
            let slots = v.len() - 1;
            v[1 + bucket % slots] += 1.0;
        }
        v
    }

    pub fn embed(&self, texts: &[String]) -> Vec<Vec<f64>> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}
