//! HTTP server that replays a fixture directory over the oracle protocol.
//!
//! Lets the HTTP client path run against authored responses, and gives the
//! conformance suite something deterministic to check.

use std::io::Cursor;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{json, Value};
use tiny_http::{Header, Method, Response, Server};

use super::{
    filter_boxes, image_content_hash, FixtureManifest, FixtureOracle, OracleBackend, OracleError,
    OracleImage, OracleRequest,
};

const WORKERS: usize = 4;

pub struct ReplayServer {
    server: Arc<Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
    requests: Arc<AtomicUsize>,
}

struct Replay {
    fixture: FixtureOracle,
    manifest: FixtureManifest,
}

fn bad_request(msg: impl Into<String>) -> (u16, Value) {
    (400, json!({ "error": msg.into() }))
}

impl Replay {
    fn decode_image(body: &Value) -> Result<image::RgbImage, (u16, Value)> {
        let b64 = body
            .get("image")
            .and_then(Value::as_str)
            .ok_or_else(|| bad_request("missing image"))?;
        let bytes = BASE64
            .decode(b64)
            .map_err(|e| bad_request(format!("image is not base64: {e}")))?;
        image::load_from_memory(&bytes)
            .map(|i| i.to_rgb8())
            .map_err(|e| bad_request(format!("image is not a PNG: {e}")))
    }

    fn text(body: &Value) -> Result<&str, (u16, Value)> {
        body.get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| bad_request("missing text"))
    }

    fn answer(&self, path: &str, body: &Value) -> Result<Value, (u16, Value)> {
        let models = &self.manifest.models;
        let lookup = |req: OracleRequest<'_>| {
            self.fixture.call(&req, models).map_err(|e| match e {
                OracleError::FixtureMiss { .. } => bad_request(e.to_string()),
                other => (503, json!({ "error": other.to_string() })),
            })
        };
        match path {
            "/v1/health" => Ok(json!({
                "status": "ok",
                "spaces": {
                    "joint_dim": self.manifest.joint_dim,
                    "sentence_dim": self.manifest.sentence_dim,
                },
            })),
            "/v1/detect" => {
                let img = Self::decode_image(body)?;
                let query = body
                    .get("query")
                    .and_then(Value::as_str)
                    .ok_or_else(|| bad_request("missing query"))?;
                let box_threshold = body
                    .get("box_threshold")
                    .and_then(Value::as_f64)
                    .ok_or_else(|| bad_request("missing box_threshold"))?;
                let hash = image_content_hash(&img);
                let raw = lookup(OracleRequest::Detect {
                    image: OracleImage {
                        subject: "request",
                        image: &img,
                        content_hash: &hash,
                    },
                    query,
                    box_threshold,
                    text_threshold: body.get("text_threshold").and_then(Value::as_f64),
                })?;
                let boxes = serde_json::from_value(raw["boxes"].clone())
                    .map_err(|e| (503, json!({ "error": format!("fixture boxes: {e}") })))?;
                let boxes = filter_boxes(boxes, box_threshold, img.width(), img.height())
                    .map_err(|e| (503, json!({ "error": e.to_string() })))?;
                Ok(json!({ "boxes": boxes, "model_id": models.detector }))
            }
            "/v1/embed_image" | "/v1/caption" => {
                let img = Self::decode_image(body)?;
                let hash = image_content_hash(&img);
                let image = OracleImage {
                    subject: "request",
                    image: &img,
                    content_hash: &hash,
                };
                lookup(if path == "/v1/caption" {
                    OracleRequest::Caption(image)
                } else {
                    OracleRequest::EmbedImage(image)
                })
            }
            "/v1/embed_text" => lookup(OracleRequest::EmbedText(Self::text(body)?)),
            "/v1/encode_sentence" => lookup(OracleRequest::EncodeSentence(Self::text(body)?)),
            _ => Err((404, json!({ "error": format!("unknown endpoint {path}") }))),
        }
    }
}

impl ReplayServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves
    /// `fixture_dir`, which must contain a `fixture.json`.
    pub fn start(fixture_dir: &Path, addr: &str) -> Result<Self, OracleError> {
        let fixture = FixtureOracle::open(fixture_dir)?;
        let manifest = fixture.manifest().cloned().ok_or_else(|| {
            OracleError::Unavailable(format!(
                "{} has no fixture.json",
                fixture_dir.display()
            ))
        })?;
        let server = Server::http(addr).map_err(|e| OracleError::Unavailable(e.to_string()))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| OracleError::Unavailable("server is not bound to an IP".into()))?;
        let server = Arc::new(server);
        let replay = Arc::new(Replay { fixture, manifest });
        let requests = Arc::new(AtomicUsize::new(0));
        let workers = (0..WORKERS)
            .map(|_| {
                let server = Arc::clone(&server);
                let replay = Arc::clone(&replay);
                let requests = Arc::clone(&requests);
                std::thread::spawn(move || {
                    for mut request in server.incoming_requests() {
                        requests.fetch_add(1, Ordering::SeqCst);
                        let path = request.url().split('?').next().unwrap_or("").to_string();
                        let mut raw = String::new();
                        let method = request.method().clone();
                        let body = match (method, request.as_reader().read_to_string(&mut raw)) {
                            (Method::Post | Method::Get, Ok(_)) if raw.trim().is_empty() => Ok(json!({})),
                            (Method::Post | Method::Get, Ok(_)) => serde_json::from_str(&raw)
                                .map_err(|e| bad_request(format!("invalid JSON: {e}"))),
                            (_, Ok(_)) => Err((405, json!({ "error": "method not allowed" }))),
                            (_, Err(e)) => Err(bad_request(e.to_string())),
                        };
                        let (status, value) = match body.and_then(|b| replay.answer(&path, &b)) {
                            Ok(v) => (200, v),
                            Err(e) => e,
                        };
                        let header = Header::from_bytes("Content-Type", "application/json")
                            .expect("static header");
                        let bytes = value.to_string().into_bytes();
                        let response = Response::new(
                            status.into(),
                            vec![header],
                            Cursor::new(bytes.clone()),
                            Some(bytes.len()),
                            None,
                        );
                        let _ = request.respond(response);
                    }
                })
            })
            .collect();
        Ok(ReplayServer {
            server,
            addr,
            workers,
            requests,
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Blocks serving requests until the process is terminated.
    pub fn wait(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ReplayServer {
    fn drop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
