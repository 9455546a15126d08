//! Chat-completions and embeddings clients over blocking HTTP.

use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{EmbeddingBackend, InFlightLimit, Message, ModelBackend};
use crate::error::{Error, Result};
use crate::knowledge_base::Embedding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpEndpoint {
    pub base_url: String,
    pub model: String,
    pub timeout_s: f64,
    pub retries: u32,
    /// First backoff delay; doubles on each retry.
    pub backoff_ms: u64,
    /// Name of the environment variable holding the bearer token.
    pub env_token_name: Option<String>,
    pub in_flight: usize,
    pub temperature: f64,
    pub multimodal: bool,
}

impl Default for HttpEndpoint {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            timeout_s: 60.0,
            retries: 3,
            backoff_ms: 500,
            env_token_name: None,
            in_flight: 4,
            temperature: 0.0,
            multimodal: false,
        }
    }
}

impl HttpEndpoint {
    pub fn validate(&self) -> Result<()> {
        if self.base_url.trim().is_empty() {
            return Err(Error::Config("backend base_url is empty".into()));
        }
        if self.timeout_s.is_nan() || self.timeout_s <= 0.0 || !self.timeout_s.is_finite() {
            return Err(Error::Config("timeout_s must be positive".into()));
        }
        if self.in_flight == 0 {
            return Err(Error::Config("in_flight must be at least 1".into()));
        }
        Ok(())
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s)
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }

    fn token(&self) -> Option<String> {
        let name = self.env_token_name.as_deref()?;
        match std::env::var(name) {
            Ok(token) if !token.is_empty() => Some(token),
            _ => {
                log::warn!(
                    "auth token variable `{name}` is not set; sending unauthenticated requests"
                );
                None
            }
        }
    }
}

/// Shared request machinery: auth, in-flight bound, retries.
struct Transport {
    endpoint: HttpEndpoint,
    client: reqwest::blocking::Client,
    token: Option<String>,
    limit: InFlightLimit,
}

fn is_transient(status: u16) -> bool {
    matches!(status, 408 | 429) || (500..600).contains(&status)
}

fn excerpt(body: &str) -> String {
    const MAX: usize = 200;
    match body.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}…", &body[..i]),
        None => body.to_string(),
    }
}

impl Transport {
    fn new(endpoint: HttpEndpoint) -> Result<Self> {
        endpoint.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(endpoint.timeout())
            .build()
            .map_err(|e| Error::backend(None, format!("failed to build HTTP client: {e}")))?;
        Ok(Self {
            token: endpoint.token(),
            limit: InFlightLimit::new(endpoint.in_flight),
            endpoint,
            client,
        })
    }

    /// POSTs `body` and returns the parsed JSON of a 2xx response.
    /// Connection failures, timeouts, 408, 429 and 5xx are retried; once a
    /// 2xx body has been received it is never re-sent.
    fn post_json(&self, path: &str, body: &Value) -> Result<Value> {
        let _slot = self.limit.acquire();
        let url = self.endpoint.url(path);
        let mut delay = Duration::from_millis(self.endpoint.backoff_ms);
        let mut attempt = 0;
        loop {
            let mut request = self.client.post(&url).json(body);
            if let Some(token) = &self.token {
                request = request.bearer_auth(token);
            }
            let failure = match request.send() {
                Ok(response) => {
                    let status = response.status().as_u16();
                    let text = response.text().unwrap_or_default();
                    if (200..300).contains(&status) {
                        if attempt > 0 {
                            log::info!("{url}: succeeded after {attempt} retries");
                        }
                        return serde_json::from_str(&text).map_err(|e| {
                            Error::backend(Some(status), format!("malformed response body: {e}"))
                        });
                    }
                    let err = Error::backend(Some(status), excerpt(&text));
                    if !is_transient(status) {
                        return Err(err);
                    }
                    err
                }
                Err(e) if e.is_timeout() => Error::Timeout(self.endpoint.timeout()),
                Err(e) => Error::backend(None, format!("request to {url} failed: {e}")),
            };
            if attempt >= self.endpoint.retries {
                return Err(failure);
            }
            attempt += 1;
            log::warn!(
                "{url}: transient failure ({failure}); retry {attempt}/{}",
                self.endpoint.retries
            );
            std::thread::sleep(delay);
            delay = delay.saturating_mul(2);
        }
    }
}

fn image_url(image_ref: &str) -> Option<String> {
    if image_ref.starts_with("http://")
        || image_ref.starts_with("https://")
        || image_ref.starts_with("data:")
    {
        return Some(image_ref.to_string());
    }
    let path = Path::new(image_ref);
    let mime = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    };
    match std::fs::read(path) {
        Ok(bytes) => Some(format!(
            "data:{mime};base64,{}",
            base64::engine::general_purpose::STANDARD.encode(bytes)
        )),
        Err(e) => {
            log::warn!("cannot read image {image_ref}: {e}; sending text only");
            None
        }
    }
}

/// Wire form of one message: plain string content, or text + image parts.
fn wire_message(message: &Message, multimodal: bool) -> Value {
    let image = if multimodal {
        message.image_ref.as_deref().and_then(image_url)
    } else {
        None
    };
    match image {
        Some(url) => json!({
            "role": message.role.as_str(),
            "content": [
                { "type": "text", "text": message.content },
                { "type": "image_url", "image_url": { "url": url } },
            ],
        }),
        None => json!({ "role": message.role.as_str(), "content": message.content }),
    }
}

pub fn chat_request_body(endpoint: &HttpEndpoint, messages: &[Message], max_tokens: u32) -> Value {
    json!({
        "model": endpoint.model,
        "messages": messages.iter().map(|m| wire_message(m, endpoint.multimodal)).collect::<Vec<_>>(),
        "max_tokens": max_tokens,
        "temperature": endpoint.temperature,
    })
}

pub struct HttpChatBackend {
    transport: Transport,
}

impl HttpChatBackend {
    pub fn new(endpoint: HttpEndpoint) -> Result<Self> {
        Ok(Self {
            transport: Transport::new(endpoint)?,
        })
    }

    pub fn endpoint(&self) -> &HttpEndpoint {
        &self.transport.endpoint
    }
}

impl ModelBackend for HttpChatBackend {
    fn generate(&self, messages: &[Message], max_tokens: u32) -> Result<String> {
        let body = chat_request_body(&self.transport.endpoint, messages, max_tokens);
        let response = self.transport.post_json("chat/completions", &body)?;
        response
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::backend(Some(200), "response has no choices[0].message.content"))
    }

    fn supports_images(&self) -> bool {
        self.transport.endpoint.multimodal
    }

    fn name(&self) -> &str {
        "http"
    }
}

pub struct HttpEmbeddingBackend {
    transport: Transport,
    dim: usize,
}

impl HttpEmbeddingBackend {
    pub fn new(endpoint: HttpEndpoint, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding.dim must be positive".into()));
        }
        Ok(Self {
            transport: Transport::new(endpoint)?,
            dim,
        })
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn embed(&self, text: &str) -> Result<Embedding> {
        let body = json!({ "model": self.transport.endpoint.model, "input": text });
        let response = self.transport.post_json("embeddings", &body)?;
        let values = response
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Embedding("response has no data[0].embedding".into()))?
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| Error::Embedding("non-numeric embedding value".into()))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != self.dim {
            return Err(Error::Embedding(format!(
                "expected {} components, got {}",
                self.dim,
                values.len()
            )));
        }
        Embedding::new(values).map_err(|e| Error::Embedding(e.to_string()))
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Connects to the endpoint's host. Any HTTP response counts as reachable.
pub fn probe(endpoint: &HttpEndpoint) -> Result<u16> {
    let client = reqwest::blocking::Client::builder()
        .timeout(endpoint.timeout())
        .build()
        .map_err(|e| Error::backend(None, e.to_string()))?;
    client
        .get(endpoint.url("models"))
        .send()
        .map(|r| r.status().as_u16())
        .map_err(|e| Error::backend(None, format!("{} unreachable: {e}", endpoint.base_url)))
}
