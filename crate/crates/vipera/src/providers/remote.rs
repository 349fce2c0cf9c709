//! HTTP clients for remote model servers.
//!
//! Vision and text servers are spoken to with a chat-completion body:
//!
//! ```json
//! {"model": "<model_name>", "temperature": 0,
//!  "messages": [{"role": "user", "content": [
//!     {"type": "text", "text": "<instruction>"},
//!     {"type": "image_url", "image_url": {"url": "data:image/png;base64,<bytes>"}}]}]}
//! ```
//!
//! and the answer is read from `choices[0].message.content`. Text requests
//! send the instruction as a plain string `content` and add `"seed"`.
//!
//! Image servers get one `{"model", "prompt", "seed", "n": 1}` POST per image
//! and must answer `{"images": ["<base64>"]}`.
//!
//! Transport errors, timeouts and 5xx/429 answers are retried up to
//! `max_retries` times; other 4xx answers fail at once.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{json, Value};
use ureq::Agent;
use vipera_core::provider::{ProviderError, TextRequest, VisionRequest};

use super::{check_vision_request, ImageGenerator, ImagePayload, ImageResult, TextBackend, VisionBackend};
use crate::config::ProviderConfig;

static REQUESTS_SENT: AtomicUsize = AtomicUsize::new(0);

/// HTTP attempts made by every remote client in this process.
pub fn requests_sent() -> usize {
    REQUESTS_SENT.load(Ordering::Relaxed)
}

struct HttpClient {
    agent: Agent,
    url: String,
    auth_token: Option<String>,
    max_retries: u32,
}

impl HttpClient {
    fn new(config: &ProviderConfig) -> Result<Self, ProviderError> {
        let url = config
            .endpoint_url
            .clone()
            .filter(|u| !u.trim().is_empty())
            .ok_or_else(|| ProviderError::InvalidRequest(format!("{} provider has no endpoint URL", config.role)))?;
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            url,
            auth_token: config.auth_token.clone(),
            max_retries: config.max_retries,
        })
    }

    fn attempt(&self, body: &Value) -> Result<Value, (ProviderError, bool)> {
        REQUESTS_SENT.fetch_add(1, Ordering::Relaxed);
        let mut request = self.agent.post(&self.url).header("Accept", "application/json");
        if let Some(token) = &self.auth_token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| (ProviderError::Unreachable(e.to_string()), true))?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let retry = status >= 500 || status == 429;
            return Err((ProviderError::Failed(format!("{} answered HTTP {status}", self.url)), retry));
        }
        response
            .body_mut()
            .read_json::<Value>()
            .map_err(|e| match e {
                ureq::Error::Io(_) | ureq::Error::Timeout(_) => (ProviderError::Unreachable(e.to_string()), true),
                other => (ProviderError::Failed(format!("malformed response: {other}")), false),
            })
    }

    fn post(&self, body: &Value) -> Result<Value, ProviderError> {
        let mut attempt = 0;
        loop {
            match self.attempt(body) {
                Ok(v) => return Ok(v),
                Err((e, retry)) if !retry || attempt >= self.max_retries => return Err(e),
                Err((e, _)) => {
                    log::warn!("attempt {} to {} failed: {e}", attempt + 1, self.url);
                    attempt += 1;
                    std::thread::sleep(Duration::from_millis(50));
                }
            }
        }
    }
}

fn chat_content(v: &Value) -> Result<String, ProviderError> {
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(String::from)
        .ok_or_else(|| ProviderError::Failed("response has no choices[0].message.content".into()))
}

pub fn vision_body(model: &str, images: &[ImagePayload], instruction: &str) -> Value {
    let mut content = vec![json!({"type": "text", "text": instruction})];
    content.extend(images.iter().map(|i| {
        json!({"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{}", BASE64.encode(&i.bytes))}})
    }));
    json!({"model": model, "temperature": 0, "messages": [{"role": "user", "content": content}]})
}

pub fn text_body(model: &str, request: &TextRequest) -> Value {
    json!({
        "model": model,
        "temperature": 0,
        "seed": request.seed,
        "messages": [{"role": "user", "content": request.instruction}],
    })
}

pub fn image_body(model: &str, prompt: &str, seed: u64) -> Value {
    json!({"model": model, "prompt": prompt, "seed": seed, "n": 1})
}

pub struct RemoteVision {
    http: HttpClient,
    model: String,
}

impl RemoteVision {
    pub fn new(config: &ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            http: HttpClient::new(config)?,
            model: config.model_name.clone(),
        })
    }
}

impl VisionBackend for RemoteVision {
    fn vision_query(&self, images: &[ImagePayload], request: &VisionRequest) -> Result<String, ProviderError> {
        check_vision_request(images, request)?;
        chat_content(&self.http.post(&vision_body(&self.model, images, &request.instruction))?)
    }
}

pub struct RemoteText {
    http: HttpClient,
    model: String,
}

impl RemoteText {
    pub fn new(config: &ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            http: HttpClient::new(config)?,
            model: config.model_name.clone(),
        })
    }
}

impl TextBackend for RemoteText {
    fn text_query(&self, request: &TextRequest) -> Result<String, ProviderError> {
        if request.instruction.trim().is_empty() {
            return Err(ProviderError::InvalidInstruction);
        }
        chat_content(&self.http.post(&text_body(&self.model, request))?)
    }
}

pub struct RemoteImageGenerator {
    http: HttpClient,
    model: String,
}

impl RemoteImageGenerator {
    pub fn new(config: &ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            http: HttpClient::new(config)?,
            model: config.model_name.clone(),
        })
    }

    fn one(&self, prompt: &str, seed: u64) -> Result<Vec<u8>, ProviderError> {
        let v = self.http.post(&image_body(&self.model, prompt, seed))?;
        let encoded = v
            .pointer("/images/0")
            .and_then(Value::as_str)
            .ok_or_else(|| ProviderError::Failed("response has no images[0]".into()))?;
        BASE64
            .decode(encoded)
            .map_err(|e| ProviderError::Failed(format!("image is not base64: {e}")))
    }
}

impl ImageGenerator for RemoteImageGenerator {
    fn generate_images(&self, prompt: &str, n: u32, base_seed: u64) -> Result<Vec<ImageResult>, ProviderError> {
        if n == 0 {
            return Err(ProviderError::InvalidRequest("n must be positive".into()));
        }
        let mut out = Vec::with_capacity(n as usize);
        let mut unreachable = None;
        for i in 0..u64::from(n) {
            match self.one(prompt, base_seed.wrapping_add(i)) {
                Ok(bytes) => out.push(Ok(bytes)),
                Err(e @ ProviderError::Unreachable(_)) => {
                    out.push(Err(e.to_string()));
                    unreachable = Some(e);
                }
                Err(e) => out.push(Err(e.to_string())),
            }
        }
        match unreachable {
            Some(e) if out.iter().all(Result::is_err) => Err(e),
            _ => Ok(out),
        }
    }
}
