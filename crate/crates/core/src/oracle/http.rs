//! HTTP/JSON oracle client.
//!
//! All endpoints are `POST` with JSON bodies; images travel as base64 PNG.
//! 503 (and any other 5xx or transport failure) is retried with
//! exponential backoff; 4xx is permanent.

use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ModelIds, OracleBackend, OracleError, OracleImage, OracleRequest};
use crate::patch::encode_png;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthSpaces {
    pub joint_dim: usize,
    pub sentence_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub spaces: HealthSpaces,
}

pub struct HttpOracle {
    base: String,
    agent: ureq::Agent,
    retries: u32,
    backoff: Duration,
}

impl HttpOracle {
    pub fn new(endpoint: &str, timeout_secs: u64, retries: u32) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(timeout_secs.max(1)))
            .build();
        HttpOracle {
            base: endpoint.trim_end_matches('/').to_string(),
            agent,
            retries,
            backoff: Duration::from_millis(100),
        }
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    /// POSTs `body` to `path`, retrying transient failures.
    pub fn post(&self, path: &str, body: &Value) -> Result<Value, OracleError> {
        let url = format!("{}{path}", self.base);
        let payload = body.to_string();
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 1));
            }
            match self
                .agent
                .post(&url)
                .set("Content-Type", "application/json")
                .send_string(&payload)
            {
                Ok(resp) => {
                    let text = resp
                        .into_string()
                        .map_err(|e| OracleError::Protocol(format!("{url}: {e}")))?;
                    return serde_json::from_str(&text)
                        .map_err(|e| OracleError::Protocol(format!("{url}: {e}")));
                }
                Err(ureq::Error::Status(code, resp)) if code < 500 => {
                    return Err(OracleError::Rejected {
                        status: code,
                        body: resp.into_string().unwrap_or_default(),
                    });
                }
                Err(ureq::Error::Status(code, resp)) => {
                    last = format!("{url}: HTTP {code} {}", resp.into_string().unwrap_or_default());
                }
                Err(ureq::Error::Transport(t)) => {
                    last = format!("{url}: {t}");
                }
            }
            log::debug!("oracle attempt {} failed: {last}", attempt + 1);
        }
        Err(OracleError::Unavailable(format!(
            "{last} (after {} attempts)",
            self.retries + 1
        )))
    }

    pub fn health(&self) -> Result<Health, OracleError> {
        let v = self.post("/v1/health", &json!({}))?;
        serde_json::from_value(v).map_err(|e| OracleError::Protocol(format!("health: {e}")))
    }
}

fn image_b64(image: &OracleImage<'_>) -> String {
    BASE64.encode(encode_png(image.image))
}

impl OracleBackend for HttpOracle {
    fn call(&self, req: &OracleRequest<'_>, models: &ModelIds) -> Result<Value, OracleError> {
        let (path, body, expected_model) = match req {
            OracleRequest::Detect {
                image,
                query,
                box_threshold,
                text_threshold,
            } => (
                "/v1/detect",
                json!({
                    "image": image_b64(image),
                    "query": query,
                    "box_threshold": box_threshold,
                    "text_threshold": text_threshold,
                }),
                &models.detector,
            ),
            OracleRequest::EmbedImage(image) => {
                ("/v1/embed_image", json!({ "image": image_b64(image) }), &models.joint)
            }
            OracleRequest::EmbedText(text) => ("/v1/embed_text", json!({ "text": text }), &models.joint),
            OracleRequest::Caption(image) => {
                ("/v1/caption", json!({ "image": image_b64(image) }), &models.captioner)
            }
            OracleRequest::EncodeSentence(text) => {
                ("/v1/encode_sentence", json!({ "text": text }), &models.sentence)
            }
        };
        let response = self.post(path, &body)?;
        match response.get("model_id").and_then(Value::as_str) {
            Some(id) if id == expected_model => Ok(response),
            Some(id) => Err(OracleError::Protocol(format!(
                "{path} answered with model {id:?}, run is configured for {expected_model:?}"
            ))),
            None => Err(OracleError::Protocol(format!("{path}: response lacks model_id"))),
        }
    }
}
