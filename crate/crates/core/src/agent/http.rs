//! Remote backends over HTTP: a chat-completions model endpoint and a
//! box-prompted segmentation service.

use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};

use super::{BackendError, BackendRequest, ModelBackend, RequestImage, Segmenter};
use crate::error::{Error, Result};
use crate::geometry::GeomBox;
use crate::mask::RleMask;

pub const API_KEY_ENV: &str = "MICROEVAL_API_KEY";

/// Transport settings shared by both clients.
#[derive(Debug, Clone)]
pub struct Transport {
    pub attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub backoff: Duration,
    pub timeout: Duration,
    pub api_key: Option<String>,
}

impl Default for Transport {
    fn default() -> Self {
        Transport {
            attempts: 3,
            backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }
}

impl Transport {
    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into()
    }

    /// POSTs `body` and returns the response text. Transport failures, 429
    /// and 5xx are retried; other statuses fail at once.
    fn post(&self, agent: &ureq::Agent, url: &str, body: &Value) -> std::result::Result<String, BackendError> {
        let attempts = self.attempts.max(1);
        let mut delay = self.backoff;
        let mut last = BackendError::Transport("no attempt made".into());
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(delay);
                delay *= 2;
            }
            let mut req = agent.post(url).header("Content-Type", "application/json");
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => {
                    let code = resp.status().as_u16();
                    let text = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| BackendError::Transport(e.to_string()));
                    match (code, text) {
                        (200..=299, Ok(t)) => return Ok(t),
                        (200..=299, Err(e)) => last = e,
                        (c, t) => {
                            last = BackendError::Status {
                                code: c,
                                body: t.unwrap_or_default().chars().take(500).collect(),
                            };
                            if c != 429 && c < 500 {
                                return Err(last);
                            }
                        }
                    }
                }
                Err(e) => last = BackendError::Transport(e.to_string()),
            }
            log::warn!("{url}: attempt {} of {attempts} failed: {last}", attempt + 1);
        }
        Err(last)
    }
}

fn png_base64(image: &RequestImage) -> std::result::Result<String, BackendError> {
    let pixels = image
        .pixels
        .as_ref()
        .ok_or_else(|| BackendError::Protocol("request image carries no pixels".into()))?;
    let png = pixels.to_png().map_err(|e| BackendError::Protocol(e.to_string()))?;
    Ok(STANDARD.encode(png))
}

/// Chat-completions endpoint taking base64 PNG image parts.
pub struct HttpBackend {
    endpoint: String,
    model: String,
    transport: Transport,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpBackend::with_transport(endpoint, model, Transport::default())
    }

    pub fn with_transport(endpoint: impl Into<String>, model: impl Into<String>, transport: Transport) -> Self {
        HttpBackend {
            endpoint: endpoint.into(),
            model: model.into(),
            agent: transport.agent(),
            transport,
        }
    }

    /// Request body for `request`.
    pub fn body(&self, request: &BackendRequest) -> std::result::Result<Value, BackendError> {
        let mut content = vec![json!({"type": "text", "text": request.prompt})];
        for img in &request.images {
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{}", png_base64(img)?)},
            }));
        }
        Ok(json!({
            "model": self.model,
            "temperature": request.decoding.temperature,
            "top_p": request.decoding.top_p,
            "messages": [{"role": "user", "content": content}],
        }))
    }
}

/// `choices[0].message.content`, as a string or a list of text parts.
pub fn completion_text(body: &str) -> std::result::Result<String, BackendError> {
    let v: Value = serde_json::from_str(body).map_err(|e| BackendError::Protocol(format!("response is not JSON: {e}")))?;
    let content = &v["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(BackendError::Protocol("response has no choices[0].message.content".into())),
    }
}

impl ModelBackend for HttpBackend {
    fn complete(&self, request: &BackendRequest) -> std::result::Result<String, BackendError> {
        let body = self.body(request)?;
        let text = self.transport.post(&self.agent, &self.endpoint, &body)?;
        completion_text(&text)
    }

    fn name(&self) -> String {
        format!("http:{}", self.model)
    }
}

/// Segmentation service: POST `{image, box, height, width}`, reply
/// `{"rle": ...}` or `{"counts": ..., "size": [h, w]}` in compressed RLE.
pub struct HttpSegmenter {
    endpoint: String,
    transport: Transport,
    agent: ureq::Agent,
}

impl HttpSegmenter {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpSegmenter::with_transport(endpoint, Transport::default())
    }

    pub fn with_transport(endpoint: impl Into<String>, transport: Transport) -> Self {
        HttpSegmenter {
            endpoint: endpoint.into(),
            agent: transport.agent(),
            transport,
        }
    }
}

impl Segmenter for HttpSegmenter {
    fn segment(&self, image: &RequestImage, prompt: &GeomBox) -> Result<RleMask> {
        let b = prompt.bounds();
        let body = json!({
            "image": png_base64(image)?,
            "box": [b.x1, b.y1, b.x2, b.y2],
            "height": image.height,
            "width": image.width,
        });
        let text = self.transport.post(&self.agent, &self.endpoint, &body)?;
        let v: Value = serde_json::from_str(&text)?;
        let counts = v["rle"]
            .as_str()
            .or_else(|| v["counts"].as_str())
            .ok_or_else(|| BackendError::Protocol("segmenter reply has no rle or counts".into()))?;
        if let Some(size) = v["size"].as_array() {
            let dims: Vec<u64> = size.iter().filter_map(Value::as_u64).collect();
            if dims != [u64::from(image.height), u64::from(image.width)] {
                return Err(Error::MaskEncoding(format!(
                    "segmenter returned size {size:?}, expected [{}, {}]",
                    image.height, image.width
                )));
            }
        }
        RleMask::decompress(counts, image.height, image.width)
    }
}
