use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use owsgg_core::model::ModelsConfig;
use owsgg_core::ImageRef;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::cache::DepthWire;
use super::{decode_f32_le, BackendError, ChatRequest, DetectionRequest, DetectionResponse, Provider, RawDepth};

/// Which wire protocol serves sentence embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedProtocol {
    /// `POST {embed_url}/embeddings` with `{model, input}`.
    OpenAi,
    /// `POST {shim_url}/embed` with `{texts}`.
    Shim,
}

/// Endpoints and credentials. Model ids come from the pipeline config.
#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Base of an OpenAI-compatible API, e.g. `http://localhost:8000/v1`.
    pub chat_url: Option<String>,
    pub api_key: Option<String>,
    pub embed_url: Option<String>,
    pub embed_protocol: EmbedProtocol,
    /// Base of the detection/depth/embedding shim.
    pub shim_url: Option<String>,
    /// Directory relative image paths are resolved against.
    pub image_root: PathBuf,
    pub timeout: Duration,
    /// Extra attempts after a transport failure or 5xx answer.
    pub retries: u32,
}

impl HttpConfig {
    /// Read `OWSGG_CHAT_URL`, `OWSGG_API_KEY`, `OWSGG_EMBED_URL`,
    /// `OWSGG_EMBED_PROTOCOL` (`openai` or `shim`), `OWSGG_SHIM_URL`,
    /// `OWSGG_TIMEOUT_SECS` and `OWSGG_RETRIES`.
    pub fn from_env(image_root: &Path) -> Result<Self, BackendError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        let embed_protocol = match var("OWSGG_EMBED_PROTOCOL").as_deref() {
            None | Some("shim") => EmbedProtocol::Shim,
            Some("openai") => EmbedProtocol::OpenAi,
            Some(other) => {
                return Err(BackendError::InvalidRequest(format!(
                    "OWSGG_EMBED_PROTOCOL must be openai or shim, got {other}"
                )))
            }
        };
        let parse_num = |k: &str, default: u64| -> Result<u64, BackendError> {
            var(k).map_or(Ok(default), |v| {
                v.parse().map_err(|_| BackendError::InvalidRequest(format!("{k} must be an integer")))
            })
        };
        Ok(HttpConfig {
            chat_url: var("OWSGG_CHAT_URL"),
            api_key: var("OWSGG_API_KEY"),
            embed_url: var("OWSGG_EMBED_URL"),
            embed_protocol,
            shim_url: var("OWSGG_SHIM_URL"),
            image_root: image_root.to_path_buf(),
            timeout: Duration::from_secs(parse_num("OWSGG_TIMEOUT_SECS", 300)?),
            retries: parse_num("OWSGG_RETRIES", 1)? as u32,
        })
    }
}

/// Blocking HTTP client for the chat, embedding, detection and depth
/// services.
pub struct HttpProvider {
    config: HttpConfig,
    models: ModelsConfig,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct DetectBody<'a> {
    image_b64: String,
    label: &'a str,
    box_threshold: f64,
    text_threshold: f64,
}

#[derive(Deserialize)]
struct ShimEmbedResponse {
    vectors: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct OpenAiEmbedding {
    index: usize,
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct OpenAiEmbedResponse {
    data: Vec<OpenAiEmbedding>,
}

impl HttpProvider {
    pub fn new(config: HttpConfig, models: ModelsConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::BackendUnavailable(e.to_string()))?;
        Ok(HttpProvider { config, models, client })
    }

    fn endpoint(base: &Option<String>, what: &str, path: &str) -> Result<String, BackendError> {
        let base = base
            .as_deref()
            .ok_or_else(|| BackendError::BackendUnavailable(format!("no {what} endpoint configured")))?;
        Ok(format!("{}/{}", base.trim_end_matches('/'), path))
    }

    fn image_path(&self, image: &ImageRef) -> PathBuf {
        let p = Path::new(&image.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.config.image_root.join(p)
        }
    }

    fn image_b64(&self, image: &ImageRef) -> Result<String, BackendError> {
        let path = self.image_path(image);
        let bytes = std::fs::read(&path)
            .map_err(|e| BackendError::InvalidRequest(format!("cannot read image {}: {e}", path.display())))?;
        Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    fn post<T: DeserializeOwned>(&self, url: &str, body: &Value) -> Result<T, BackendError> {
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                log::warn!("retrying {url}: {last}");
            }
            let mut req = self.client.post(url).json(body);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status();
            if status.is_server_error() {
                last = format!("HTTP {status}");
                continue;
            }
            if !status.is_success() {
                let text = resp.text().unwrap_or_default();
                return Err(BackendError::InvalidRequest(format!("HTTP {status} from {url}: {text}")));
            }
            return resp.json::<T>().map_err(|e| BackendError::MalformedResponse(format!("{url}: {e}")));
        }
        Err(BackendError::BackendUnavailable(format!("{url}: {last}")))
    }

    /// Body of a chat-completions request.
    pub fn chat_body(&self, req: &ChatRequest) -> Result<Value, BackendError> {
        let mut content = Vec::new();
        if let Some(image) = &req.image {
            let mime = match Path::new(&image.path).extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
                Some(e) if e == "png" => "image/png",
                Some(e) if e == "webp" => "image/webp",
                _ => "image/jpeg",
            };
            let url = format!("data:{mime};base64,{}", self.image_b64(image)?);
            content.push(json!({"type": "image_url", "image_url": {"url": url}}));
        }
        content.push(json!({"type": "text", "text": req.prompt}));
        let s = &req.sampling;
        Ok(json!({
            "model": self.models.chat,
            "messages": [{"role": "user", "content": content}],
            "n": 1,
            "temperature": s.temperature,
            "top_p": s.top_p,
            "max_tokens": s.max_tokens,
            "presence_penalty": s.presence_penalty,
            "repetition_penalty": s.repetition_penalty,
        }))
    }
}

impl Provider for HttpProvider {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let url = Self::endpoint(&self.config.chat_url, "chat", "chat/completions")?;
        let resp: Value = self.post(&url, &self.chat_body(req)?)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| BackendError::MalformedResponse("chat response has no text content".into()))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        match self.config.embed_protocol {
            EmbedProtocol::Shim => {
                let url = Self::endpoint(&self.config.shim_url, "shim", "embed")?;
                let resp: ShimEmbedResponse = self.post(&url, &json!({ "texts": texts }))?;
                Ok(resp.vectors)
            }
            EmbedProtocol::OpenAi => {
                let url = Self::endpoint(&self.config.embed_url, "embedding", "embeddings")?;
                let resp: OpenAiEmbedResponse =
                    self.post(&url, &json!({ "model": self.models.embed, "input": texts }))?;
                let mut data = resp.data;
                data.sort_by_key(|d| d.index);
                Ok(data.into_iter().map(|d| d.embedding).collect())
            }
        }
    }

    fn detect(&self, req: &DetectionRequest) -> Result<DetectionResponse, BackendError> {
        let url = Self::endpoint(&self.config.shim_url, "shim", "detect")?;
        let body = DetectBody {
            image_b64: self.image_b64(&req.image)?,
            label: &req.label,
            box_threshold: req.box_threshold,
            text_threshold: req.text_threshold,
        };
        let resp: DetectionResponse = self.post(&url, &serde_json::to_value(body).expect("body serializes"))?;
        if resp.boxes.len() != resp.scores.len() {
            return Err(BackendError::MalformedResponse("boxes and scores differ in length".into()));
        }
        Ok(resp)
    }

    fn depth(&self, image: &ImageRef) -> Result<RawDepth, BackendError> {
        let url = Self::endpoint(&self.config.shim_url, "shim", "depth")?;
        let resp: DepthWire = self.post(&url, &json!({ "image_b64": self.image_b64(image)? }))?;
        let values = decode_f32_le(&resp.values_b64)?;
        if values.len() != resp.width as usize * resp.height as usize {
            return Err(BackendError::MalformedResponse(format!(
                "depth map {}x{} carries {} values",
                resp.width,
                resp.height,
                values.len()
            )));
        }
        Ok(RawDepth { width: resp.width, height: resp.height, values })
    }
}
