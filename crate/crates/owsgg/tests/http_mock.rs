use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use owsgg::backends::{
    encode_f32_le, BackendError, ChatRequest, DetectionRequest, EmbedProtocol, HttpConfig, HttpProvider, Provider,
};
use owsgg_core::model::{ModelsConfig, SamplingConfig};
use owsgg_core::ImageRef;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

type Handler = dyn Fn(&str, &Value, usize) -> (u16, Value) + Send + Sync;

/// Minimal HTTP/1.1 server answering each request through `handler`.
struct MockServer {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl MockServer {
    fn start(handler: impl Fn(&str, &Value, usize) -> (u16, Value) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        let handler: Arc<Handler> = Arc::new(handler);
        let count = Arc::new(AtomicUsize::new(0));
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).is_err() {
                    continue;
                }
                let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
                let (mut length, mut auth) = (0usize, None);
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    let (name, value) = line.split_once(':').unwrap_or(("", ""));
                    match name.to_ascii_lowercase().as_str() {
                        "content-length" => length = value.trim().parse().unwrap_or(0),
                        "authorization" => auth = Some(value.trim().to_string()),
                        _ => {}
                    }
                }
                let mut body = vec![0u8; length];
                reader.read_exact(&mut body).unwrap();
                let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
                let n = count.fetch_add(1, Ordering::SeqCst);
                let (status, reply) = handler(&path, &body, n);
                log.lock().unwrap().push(Seen { path, auth, body });
                let text = reply.to_string();
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
            }
        });
        MockServer { url, seen }
    }

    fn seen(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn config(server: &MockServer, root: &Path) -> HttpConfig {
    HttpConfig {
        chat_url: Some(format!("{}/v1", server.url)),
        api_key: Some("secret".into()),
        embed_url: Some(format!("{}/v1", server.url)),
        embed_protocol: EmbedProtocol::Shim,
        shim_url: Some(server.url.clone()),
        image_root: root.to_path_buf(),
        timeout: Duration::from_secs(10),
        retries: 1,
    }
}

fn image_dir() -> (tempfile::TempDir, ImageRef) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.png"), b"\x89PNGfake").unwrap();
    (dir, ImageRef::new("a", "a.png", 4, 2).unwrap())
}

#[test]
fn chat_posts_openai_body_with_inline_image() {
    let server = MockServer::start(|_, _, _| (200, json!({"choices": [{"message": {"content": "cup, table"}}]})));
    let (dir, image) = image_dir();
    let provider = HttpProvider::new(config(&server, dir.path()), ModelsConfig::default()).unwrap();
    let req = ChatRequest { image: Some(image), prompt: "list".into(), sampling: SamplingConfig::default() };
    assert_eq!(provider.chat(&req).unwrap(), "cup, table");

    let seen = server.seen();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer secret"));
    let body = &seen[0].body;
    assert_eq!(body["model"], json!(ModelsConfig::default().chat));
    assert_eq!(body["n"], json!(1));
    let content = &body["messages"][0]["content"];
    assert!(content[0]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
    assert_eq!(content[1]["text"], json!("list"));
}

#[test]
fn chat_without_text_is_malformed() {
    let server = MockServer::start(|_, _, _| (200, json!({"choices": []})));
    let (dir, _) = image_dir();
    let provider = HttpProvider::new(config(&server, dir.path()), ModelsConfig::default()).unwrap();
    let req = ChatRequest { image: None, prompt: "x".into(), sampling: SamplingConfig::default() };
    assert!(matches!(provider.chat(&req), Err(BackendError::MalformedResponse(_))));
}

#[test]
fn shim_and_openai_embeddings() {
    let server = MockServer::start(|path, body, _| match path {
        "/embed" => {
            let n = body["texts"].as_array().unwrap().len();
            (200, json!({"vectors": vec![vec![1.0, 0.0]; n]}))
        }
        "/v1/embeddings" => (
            200,
            json!({"data": [
                {"index": 1, "embedding": [0.0, 2.0]},
                {"index": 0, "embedding": [3.0, 0.0]}
            ]}),
        ),
        _ => (404, json!({})),
    });
    let (dir, _) = image_dir();
    let texts = vec!["a".to_string(), "b".to_string()];

    let shim = HttpProvider::new(config(&server, dir.path()), ModelsConfig::default()).unwrap();
    assert_eq!(shim.embed(&texts).unwrap(), vec![vec![1.0, 0.0]; 2]);

    let mut cfg = config(&server, dir.path());
    cfg.embed_protocol = EmbedProtocol::OpenAi;
    let openai = HttpProvider::new(cfg, ModelsConfig::default()).unwrap();
    assert_eq!(openai.embed(&texts).unwrap(), vec![vec![3.0, 0.0], vec![0.0, 2.0]]);

    let seen = server.seen();
    assert_eq!(seen[0].body, json!({"texts": ["a", "b"]}));
    assert_eq!(seen[1].body["input"], json!(["a", "b"]));
    assert_eq!(seen[1].body["model"], json!(ModelsConfig::default().embed));
}

#[test]
fn detect_and_depth_protocols() {
    let server = MockServer::start(|path, _, _| match path {
        "/detect" => (200, json!({"boxes": [[0.0, 0.0, 2.0, 1.0]], "scores": [0.7]})),
        "/depth" => (200, json!({"width": 2, "height": 2, "values_b64": encode_f32_le(&[1.0, 2.0, 3.0, 4.0])})),
        _ => (404, json!({})),
    });
    let (dir, image) = image_dir();
    let provider = HttpProvider::new(config(&server, dir.path()), ModelsConfig::default()).unwrap();
    let req = DetectionRequest { image: image.clone(), label: "cup".into(), box_threshold: 0.35, text_threshold: 0.25 };
    let det = provider.detect(&req).unwrap();
    assert_eq!(det.scores, vec![0.7]);
    let depth = provider.depth(&image).unwrap();
    assert_eq!((depth.width, depth.height), (2, 2));
    assert_eq!(depth.values, vec![1.0, 2.0, 3.0, 4.0]);

    let seen = server.seen();
    assert_eq!(seen[0].body["label"], json!("cup"));
    assert_eq!(seen[0].body["box_threshold"], json!(0.35));
    assert!(seen[0].body["image_b64"].as_str().is_some_and(|s| !s.is_empty()));
    assert!(seen[1].body["image_b64"].is_string());
}

#[test]
fn short_depth_payload_is_rejected() {
    let server =
        MockServer::start(|_, _, _| (200, json!({"width": 3, "height": 3, "values_b64": encode_f32_le(&[1.0])})));
    let (dir, image) = image_dir();
    let provider = HttpProvider::new(config(&server, dir.path()), ModelsConfig::default()).unwrap();
    assert!(matches!(provider.depth(&image), Err(BackendError::MalformedResponse(_))));
}

#[test]
fn server_error_is_retried_once() {
    let server = MockServer::start(|_, body, n| {
        if n == 0 {
            (500, json!({"error": "busy"}))
        } else {
            (200, json!({"vectors": vec![vec![1.0]; body["texts"].as_array().unwrap().len()]}))
        }
    });
    let (dir, _) = image_dir();
    let provider = HttpProvider::new(config(&server, dir.path()), ModelsConfig::default()).unwrap();
    assert_eq!(provider.embed(&["x".to_string()]).unwrap(), vec![vec![1.0]]);
    assert_eq!(server.seen().len(), 2);
}

#[test]
fn persistent_server_error_is_unavailable() {
    let server = MockServer::start(|_, _, _| (503, json!({})));
    let (dir, _) = image_dir();
    let provider = HttpProvider::new(config(&server, dir.path()), ModelsConfig::default()).unwrap();
    assert!(matches!(provider.embed(&["x".to_string()]), Err(BackendError::BackendUnavailable(_))));
    assert_eq!(server.seen().len(), 2);
}

#[test]
fn client_error_is_not_retried() {
    let server = MockServer::start(|_, _, _| (400, json!({"error": "bad"})));
    let (dir, _) = image_dir();
    let provider = HttpProvider::new(config(&server, dir.path()), ModelsConfig::default()).unwrap();
    assert!(matches!(provider.embed(&["x".to_string()]), Err(BackendError::InvalidRequest(_))));
    assert_eq!(server.seen().len(), 1);
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    // bind then drop so the port is very likely closed
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let (dir, image) = image_dir();
    let cfg = HttpConfig {
        chat_url: Some(format!("http://127.0.0.1:{port}/v1")),
        api_key: None,
        embed_url: None,
        embed_protocol: EmbedProtocol::Shim,
        shim_url: Some(format!("http://127.0.0.1:{port}")),
        image_root: dir.path().to_path_buf(),
        timeout: Duration::from_secs(2),
        retries: 0,
    };
    let provider = HttpProvider::new(cfg, ModelsConfig::default()).unwrap();
    assert!(matches!(provider.depth(&image), Err(BackendError::BackendUnavailable(_))));
}

#[test]
fn missing_endpoint_and_missing_image() {
    let (dir, _) = image_dir();
    let cfg = HttpConfig {
        chat_url: None,
        api_key: None,
        embed_url: None,
        embed_protocol: EmbedProtocol::OpenAi,
        shim_url: None,
        image_root: dir.path().to_path_buf(),
        timeout: Duration::from_secs(2),
        retries: 0,
    };
    let provider = HttpProvider::new(cfg, ModelsConfig::default()).unwrap();
    assert!(matches!(provider.embed(&["x".to_string()]), Err(BackendError::BackendUnavailable(_))));

    let server = MockServer::start(|_, _, _| (200, json!({})));
    let provider = HttpProvider::new(config(&server, dir.path()), ModelsConfig::default()).unwrap();
    let ghost = ImageRef::new("g", "missing.jpg", 4, 2).unwrap();
    assert!(matches!(provider.depth(&ghost), Err(BackendError::InvalidRequest(_))));
    assert!(server.seen().is_empty());
}
