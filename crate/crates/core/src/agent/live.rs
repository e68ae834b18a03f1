use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{AgentRequest, Backend};
use crate::error::{Error, Result};
use crate::http::{HttpTransport, ReqwestTransport, Semaphore};

pub const ENV_API_BASE: &str = "MELO_API_BASE";
pub const ENV_API_KEY: &str = "MELO_API_KEY";

#[derive(Debug, Clone, PartialEq)]
pub struct LiveBackendConfig {
    pub api_base: String,
    pub api_key: Option<String>,
    pub concurrency: usize,
    pub timeout: Duration,
    pub retry_backoff: Duration,
}

impl Default for LiveBackendConfig {
    fn default() -> Self {
        LiveBackendConfig {
            api_base: "http://localhost:8000/v1".to_string(),
            api_key: None,
            concurrency: 4,
            timeout: Duration::from_secs(120),
            retry_backoff: Duration::from_secs(1),
        }
    }
}

impl LiveBackendConfig {
    /// Reads `MELO_API_BASE` and `MELO_API_KEY`, keeping defaults for anything unset.
    pub fn from_env() -> Self {
        let mut cfg = LiveBackendConfig::default();
        if let Ok(base) = std::env::var(ENV_API_BASE) {
            cfg.api_base = base;
        }
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        cfg
    }
}

/// OpenAI-compatible chat-completion client.
pub struct LiveBackend {
    config: LiveBackendConfig,
    transport: Arc<dyn HttpTransport>,
    in_flight: Semaphore,
}

impl LiveBackend {
    pub fn new(config: LiveBackendConfig) -> Result<Self> {
        let transport = ReqwestTransport::new().map_err(|e| Error::BackendUnreachable(e.0))?;
        Ok(Self::with_transport(config, Arc::new(transport)))
    }

    pub fn with_transport(config: LiveBackendConfig, transport: Arc<dyn HttpTransport>) -> Self {
        let in_flight = Semaphore::new(config.concurrency);
        LiveBackend { config, transport, in_flight }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.api_base.trim_end_matches('/'))
    }

    fn body(&self, req: &AgentRequest) -> Result<Value> {
        let content = match &req.image {
            None => Value::String(req.prompt.clone()),
            Some(image) => json!([
                {"type": "text", "text": req.prompt},
                {"type": "image_url", "image_url": {"url": image_url(image)?}},
            ]),
        };
        let mut body = json!({
            "model": req.params.model_id,
            "messages": [{"role": "user", "content": content}],
            "temperature": req.params.temperature,
            "stream": false,
        });
        if let Some(seed) = req.params.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }

    fn send_once(&self, url: &str, body: &str) -> Result<String> {
        let mut headers = Vec::new();
        if let Some(key) = &self.config.api_key {
            headers.push(("Authorization".to_string(), format!("Bearer {key}")));
        }
        let resp = {
            let _permit = self.in_flight.acquire();
            self.transport.post_json(url, &headers, body, self.config.timeout).map_err(|e| Error::BackendUnreachable(e.0))?
        };
        if !resp.is_success() {
            return Err(Error::BackendRefused { status: resp.status, body: resp.body });
        }
        parse_completion(&resp.body)
    }
}

impl Backend for LiveBackend {
    fn name(&self) -> &str {
        "openai"
    }

    fn complete(&self, req: &AgentRequest) -> Result<String> {
        let url = self.endpoint();
        let body = serde_json::to_string(&self.body(req)?)?;
        match self.send_once(&url, &body) {
            Err(Error::BackendUnreachable(first)) => {
                log::warn!("{} backend unreachable ({first}); retrying once", req.role);
                std::thread::sleep(self.config.retry_backoff);
                self.send_once(&url, &body)
            }
            other => other,
        }
    }
}

fn parse_completion(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body).map_err(|e| Error::FormatViolation(format!("completion body is not JSON: {e}")))?;
    let content = &v["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Ok(s.clone()),
        // some servers return content parts
        Value::Array(parts) => Ok(parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect::<Vec<_>>().join("")),
        _ => Err(Error::FormatViolation("completion has no choices[0].message.content".into())),
    }
}

fn image_url(image: &str) -> Result<String> {
    if image.starts_with("http://") || image.starts_with("https://") || image.starts_with("data:") {
        return Ok(image.to_string());
    }
    let path = Path::new(image);
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading image {image}"), e))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    };
    Ok(format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{generate, GenerationParams, Role};
    use crate::http::{HttpResponse, TransportError};
    use std::sync::Mutex;

    #[derive(Default)]
    struct Fake {
        replies: Mutex<Vec<Result<HttpResponse, TransportError>>>,
        bodies: Mutex<Vec<String>>,
        headers: Mutex<Vec<Vec<(String, String)>>>,
    }

    impl HttpTransport for Fake {
        fn get(&self, _: &str, _: &[(String, String)], _: Duration) -> Result<HttpResponse, TransportError> {
            unreachable!()
        }

        fn post_json(&self, _url: &str, headers: &[(String, String)], body: &str, _: Duration) -> Result<HttpResponse, TransportError> {
            self.bodies.lock().unwrap().push(body.to_string());
            self.headers.lock().unwrap().push(headers.to_vec());
            self.replies.lock().unwrap().remove(0)
        }
    }

    fn completion(text: &str) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse::ok(json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()))
    }

    fn backend(fake: Arc<Fake>) -> LiveBackend {
        let cfg =
            LiveBackendConfig { api_key: Some("sk-test".into()), retry_backoff: Duration::from_millis(1), ..LiveBackendConfig::default() };
        LiveBackend::with_transport(cfg, fake)
    }

    #[test]
    fn sends_chat_completion_shape() {
        let fake = Arc::new(Fake::default());
        fake.replies.lock().unwrap().push(completion("yes"));
        let b = backend(fake.clone());
        let req = AgentRequest::text(Role::Judge, "question", GenerationParams::new("gpt-x"));
        assert_eq!(generate(&req, &b).unwrap().text, "yes");
        let sent: Value = serde_json::from_str(&fake.bodies.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["model"], "gpt-x");
        assert_eq!(sent["temperature"], 0.75);
        assert_eq!(sent["messages"][0]["content"], "question");
        assert_eq!(fake.headers.lock().unwrap()[0][0].1, "Bearer sk-test");
    }

    #[test]
    fn long_prompt_is_truncated_before_sending() {
        let fake = Arc::new(Fake::default());
        fake.replies.lock().unwrap().push(completion("ok"));
        let b = backend(fake.clone());
        let prompt = vec!["tok"; 7500].join(" ");
        assert_eq!(crate::agent::approximate_token_count(&prompt), 10_000);
        let reply = generate(&AgentRequest::text(Role::Summarizer, prompt, GenerationParams::new("m")), &b).unwrap();
        assert!(reply.truncated);
        let sent: Value = serde_json::from_str(&fake.bodies.lock().unwrap()[0]).unwrap();
        let content = sent["messages"][0]["content"].as_str().unwrap();
        assert!(crate::agent::approximate_token_count(content) <= 512);
    }

    #[test]
    fn http_error_is_refused_without_retry() {
        let fake = Arc::new(Fake::default());
        fake.replies.lock().unwrap().push(Ok(HttpResponse { status: 429, body: "slow down".into() }));
        let b = backend(fake.clone());
        let err = generate(&AgentRequest::text(Role::Judge, "q", GenerationParams::new("m")), &b).unwrap_err();
        assert!(matches!(err, Error::BackendRefused { status: 429, .. }));
        assert_eq!(fake.bodies.lock().unwrap().len(), 1);
    }

    #[test]
    fn unreachable_retries_once() {
        let fake = Arc::new(Fake::default());
        fake.replies.lock().unwrap().push(Err(TransportError("refused".into())));
        fake.replies.lock().unwrap().push(completion("second"));
        let b = backend(fake.clone());
        let reply = generate(&AgentRequest::text(Role::Judge, "q", GenerationParams::new("m")), &b).unwrap();
        assert_eq!(reply.text, "second");

        let fake = Arc::new(Fake::default());
        fake.replies.lock().unwrap().push(Err(TransportError("refused".into())));
        fake.replies.lock().unwrap().push(Err(TransportError("refused again".into())));
        let err = generate(&AgentRequest::text(Role::Judge, "q", GenerationParams::new("m")), &backend(fake.clone())).unwrap_err();
        assert!(matches!(err, Error::BackendUnreachable(_)));
        assert_eq!(fake.bodies.lock().unwrap().len(), 2);
    }

    #[test]
    fn vision_request_carries_image_part() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("pic.png");
        std::fs::write(&img, [0x89, b'P', b'N', b'G']).unwrap();
        let fake = Arc::new(Fake::default());
        fake.replies.lock().unwrap().push(completion("A man in a red jersey."));
        let b = backend(fake.clone());
        let req = AgentRequest::vision("describe", Some(img.display().to_string()), GenerationParams::new("lvm"));
        assert_eq!(generate(&req, &b).unwrap().text, "A man in a red jersey.");
        let sent: Value = serde_json::from_str(&fake.bodies.lock().unwrap()[0]).unwrap();
        let url = sent["messages"][0]["content"][1]["image_url"]["url"].as_str().unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
    }

    #[test]
    fn malformed_completion() {
        assert!(matches!(parse_completion("{}"), Err(Error::FormatViolation(_))));
        assert!(matches!(parse_completion("nope"), Err(Error::FormatViolation(_))));
    }
}
