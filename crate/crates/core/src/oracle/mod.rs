//! Uniform client for the foundation-model oracles.
//!
//! Five oracles sit behind one interface: the open-vocabulary detector, the
//! joint-space image and text embedders, the captioner and the sentence
//! encoder. A backend ([`HttpOracle`] or [`FixtureOracle`]) answers raw
//! requests; [`OracleClient`] layers the content-addressed disk cache,
//! threshold filtering, vector normalization and dimension bookkeeping on
//! top, so every downstream stage sees identical values whichever backend
//! produced them.

mod cache;
pub mod conformance;
mod fixture;
mod http;
mod replay;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifact::sha256_hex;
use crate::patch::{Patch, SemanticClass};

pub use cache::{cache_key, canonical_params, CacheEntry, DiskCache};
pub use fixture::{FixtureManifest, FixtureOracle, FixtureWriter};
pub use http::HttpOracle;
pub use replay::ReplayServer;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("oracle unavailable: {0}")]
    Unavailable(String),

    #[error("oracle rejected request (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },

    #[error("fixture has no {kind} entry for {subject} (key {key})")]
    FixtureMiss {
        kind: OracleKind,
        subject: String,
        key: String,
    },

    #[error("{space} vector has dimension {got}, run recorded {expected}")]
    DimensionMismatch {
        space: SpaceId,
        expected: usize,
        got: usize,
    },

    #[error("degenerate {space} embedding: {reason}")]
    DegenerateVector { space: SpaceId, reason: String },

    #[error("malformed oracle response: {0}")]
    Protocol(String),

    #[error("cache I/O on {path}: {reason}")]
    Cache { path: PathBuf, reason: String },
}

impl OracleError {
    /// Whether retrying the same request can succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, OracleError::Unavailable(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Detect,
    /// Threshold-free detector proposals; only fixtures store this kind.
    DetectProposals,
    EmbedImage,
    EmbedText,
    Caption,
    EncodeSentence,
}

impl OracleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OracleKind::Detect => "detect",
            OracleKind::DetectProposals => "detect_proposals",
            OracleKind::EmbedImage => "embed_image",
            OracleKind::EmbedText => "embed_text",
            OracleKind::Caption => "caption",
            OracleKind::EncodeSentence => "encode_sentence",
        }
    }
}

impl fmt::Display for OracleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceId {
    JointImage,
    JointText,
    Sentence,
}

/// Spaces whose vectors are mutually comparable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpaceFamily {
    Joint,
    Sentence,
}

impl SpaceId {
    pub fn family(self) -> SpaceFamily {
        match self {
            SpaceId::JointImage | SpaceId::JointText => SpaceFamily::Joint,
            SpaceId::Sentence => SpaceFamily::Sentence,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SpaceId::JointImage => "joint_image",
            SpaceId::JointText => "joint_text",
            SpaceId::Sentence => "sentence",
        }
    }
}

impl fmt::Display for SpaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub space_id: SpaceId,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn raw(values: Vec<f64>, space_id: SpaceId) -> Self {
        EmbeddingVector {
            values,
            space_id,
            normalized: false,
        }
    }

    /// L2-normalizes `values`. Empty, non-finite and zero vectors are
    /// rejected since cosine is undefined on them.
    pub fn normalized(values: Vec<f64>, space_id: SpaceId) -> Result<Self, OracleError> {
        let degenerate = |reason: &str| OracleError::DegenerateVector {
            space: space_id,
            reason: reason.to_string(),
        };
        if values.is_empty() {
            return Err(degenerate("empty vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(degenerate("non-finite entry"));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(degenerate("zero vector"));
        }
        Ok(EmbeddingVector {
            values: values.into_iter().map(|v| v / norm).collect(),
            space_id,
            normalized: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub score: f64,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub patch_id: String,
    pub query: String,
    /// Descending by score.
    pub boxes: Vec<DetectionBox>,
    pub detector_id: String,
}

impl DetectionResult {
    /// No surviving box means the class was not found in the patch.
    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub patch_id: String,
    pub text: String,
    pub captioner_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    Http,
    Fixture,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelIds {
    #[serde(default = "default_detector_id")]
    pub detector: String,
    #[serde(default = "default_joint_id")]
    pub joint: String,
    #[serde(default = "default_captioner_id")]
    pub captioner: String,
    #[serde(default = "default_sentence_id")]
    pub sentence: String,
}

fn default_detector_id() -> String {
    "grounding-dino".into()
}
fn default_joint_id() -> String {
    "clip".into()
}
fn default_captioner_id() -> String {
    "blip2".into()
}
fn default_sentence_id() -> String {
    "mpnet".into()
}

impl Default for ModelIds {
    fn default() -> Self {
        ModelIds {
            detector: default_detector_id(),
            joint: default_joint_id(),
            captioner: default_captioner_id(),
            sentence: default_sentence_id(),
        }
    }
}

fn default_box_threshold() -> f64 {
    0.35
}
fn default_text_threshold() -> Option<f64> {
    Some(0.25)
}
fn default_timeout() -> u64 {
    60
}
fn default_max_inflight() -> usize {
    8
}
fn default_retries() -> u32 {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub mode: OracleMode,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub fixture_dir: Option<PathBuf>,
    #[serde(default = "default_box_threshold")]
    pub box_threshold: f64,
    /// `None` selects a single-threshold detector.
    #[serde(default = "default_text_threshold")]
    pub text_threshold: Option<f64>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_inflight")]
    pub max_inflight: usize,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default)]
    pub models: ModelIds,
}

impl OracleConfig {
    pub fn fixture(dir: impl Into<PathBuf>) -> Self {
        OracleConfig {
            mode: OracleMode::Fixture,
            endpoint: None,
            fixture_dir: Some(dir.into()),
            box_threshold: default_box_threshold(),
            text_threshold: default_text_threshold(),
            timeout_secs: default_timeout(),
            max_inflight: default_max_inflight(),
            retries: default_retries(),
            models: ModelIds::default(),
        }
    }

    pub fn http(endpoint: impl Into<String>) -> Self {
        OracleConfig {
            mode: OracleMode::Http,
            endpoint: Some(endpoint.into()),
            fixture_dir: None,
            ..Self::fixture("")
        }
    }

    /// Single similarity threshold of 0.25, as used with Owl-style detectors.
    pub fn owl_style(mut self) -> Self {
        self.box_threshold = 0.25;
        self.text_threshold = None;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.box_threshold) {
            return Err(format!("box_threshold {} outside [0,1]", self.box_threshold));
        }
        if let Some(t) = self.text_threshold {
            if !in_unit(t) {
                return Err(format!("text_threshold {t} outside [0,1]"));
            }
        }
        if self.max_inflight == 0 {
            return Err("max_inflight must be positive".into());
        }
        match self.mode {
            OracleMode::Http if self.endpoint.is_none() => {
                Err("http mode requires an endpoint".into())
            }
            OracleMode::Fixture if self.fixture_dir.is_none() => {
                Err("fixture mode requires fixture_dir".into())
            }
            _ => Ok(()),
        }
    }
}

/// Content address of an RGB crop: SHA-256 over a dimension header and the
/// raw row-major pixels. PNG encoding details never enter the hash.
pub fn image_content_hash(img: &RgbImage) -> String {
    let mut bytes = format!("rgb8:{}x{}:", img.width(), img.height()).into_bytes();
    bytes.extend_from_slice(img.as_raw());
    sha256_hex(&bytes)
}

pub fn text_content_hash(text: &str) -> String {
    sha256_hex(text.as_bytes())
}

/// An image submitted to an oracle.
#[derive(Clone, Copy, Debug)]
pub struct OracleImage<'a> {
    /// Human-readable subject (the patch id), used in error messages only.
    pub subject: &'a str,
    pub image: &'a RgbImage,
    pub content_hash: &'a str,
}

impl<'a> From<&'a Patch> for OracleImage<'a> {
    fn from(p: &'a Patch) -> Self {
        OracleImage {
            subject: &p.patch_id,
            image: &p.crop,
            content_hash: &p.crop_sha256,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum OracleRequest<'a> {
    Detect {
        image: OracleImage<'a>,
        query: &'a str,
        box_threshold: f64,
        text_threshold: Option<f64>,
    },
    EmbedImage(OracleImage<'a>),
    EmbedText(&'a str),
    Caption(OracleImage<'a>),
    EncodeSentence(&'a str),
}

impl OracleRequest<'_> {
    pub fn kind(&self) -> OracleKind {
        match self {
            OracleRequest::Detect { .. } => OracleKind::Detect,
            OracleRequest::EmbedImage(_) => OracleKind::EmbedImage,
            OracleRequest::EmbedText(_) => OracleKind::EmbedText,
            OracleRequest::Caption(_) => OracleKind::Caption,
            OracleRequest::EncodeSentence(_) => OracleKind::EncodeSentence,
        }
    }

    pub fn subject(&self) -> String {
        match self {
            OracleRequest::Detect { image, .. }
            | OracleRequest::EmbedImage(image)
            | OracleRequest::Caption(image) => image.subject.to_string(),
            OracleRequest::EmbedText(t) | OracleRequest::EncodeSentence(t) => {
                let mut s: String = t.chars().take(48).collect();
                if s.len() < t.len() {
                    s.push('…');
                }
                format!("{s:?}")
            }
        }
    }

    pub fn content_hash(&self) -> String {
        match self {
            OracleRequest::Detect { image, .. }
            | OracleRequest::EmbedImage(image)
            | OracleRequest::Caption(image) => image.content_hash.to_string(),
            OracleRequest::EmbedText(t) | OracleRequest::EncodeSentence(t) => {
                text_content_hash(t)
            }
        }
    }

    /// Parameters that, with the content hash, fully determine the response.
    pub fn params(&self, models: &ModelIds) -> Value {
        match self {
            OracleRequest::Detect {
                query,
                box_threshold,
                text_threshold,
                ..
            } => json!({
                "box_threshold": box_threshold,
                "detector_id": models.detector,
                "query": query,
                "text_threshold": text_threshold,
            }),
            OracleRequest::EmbedImage(_) | OracleRequest::EmbedText(_) => {
                json!({ "model_id": models.joint })
            }
            OracleRequest::Caption(_) => json!({ "model_id": models.captioner }),
            OracleRequest::EncodeSentence(_) => json!({ "model_id": models.sentence }),
        }
    }

    pub fn cache_key(&self, models: &ModelIds) -> String {
        cache_key(
            self.kind().as_str(),
            &self.content_hash(),
            &canonical_params(&self.params(models)),
        )
    }
}

/// Answers raw oracle requests. Responses use the wire shapes of the HTTP
/// protocol: `{boxes, model_id}`, `{vector, model_id}`, `{caption, model_id}`.
pub trait OracleBackend: Send + Sync {
    fn call(&self, req: &OracleRequest<'_>, models: &ModelIds) -> Result<Value, OracleError>;
}

#[derive(Debug, Deserialize)]
struct BoxesBody {
    boxes: Vec<DetectionBox>,
    #[allow(dead_code)]
    #[serde(default)]
    model_id: Option<String>,
}

#[derive(Debug, Deserialize)]
struct VectorBody {
    vector: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct CaptionBody {
    caption: String,
}

fn decode<T: serde::de::DeserializeOwned>(kind: OracleKind, v: Value) -> Result<T, OracleError> {
    serde_json::from_value(v).map_err(|e| OracleError::Protocol(format!("{kind}: {e}")))
}

/// Keeps boxes scoring strictly above the box threshold, checks that every
/// box lies inside the submitted image, and orders by descending score.
pub fn filter_boxes(
    mut boxes: Vec<DetectionBox>,
    box_threshold: f64,
    width: u32,
    height: u32,
) -> Result<Vec<DetectionBox>, OracleError> {
    const SLACK: f64 = 1e-6;
    for b in &boxes {
        if !(0.0..=1.0).contains(&b.score) || !b.score.is_finite() {
            return Err(OracleError::Protocol(format!("box score {} outside [0,1]", b.score)));
        }
        let inside = b.x0 >= -SLACK
            && b.y0 >= -SLACK
            && b.x0 <= b.x1
            && b.y0 <= b.y1
            && b.x1 <= f64::from(width) + SLACK
            && b.y1 <= f64::from(height) + SLACK;
        if !inside {
            return Err(OracleError::Protocol(format!(
                "box ({}, {}, {}, {}) outside {width}x{height} patch",
                b.x0, b.y0, b.x1, b.y1
            )));
        }
    }
    boxes.retain(|b| b.score > box_threshold);
    boxes.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.x0.total_cmp(&b.x0))
            .then(a.y0.total_cmp(&b.y0))
            .then(a.x1.total_cmp(&b.x1))
            .then(a.y1.total_cmp(&b.y1))
            .then(a.label.cmp(&b.label))
    });
    Ok(boxes)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleStats {
    pub backend_calls: usize,
    pub cache_hits: usize,
}

/// Cached, validating front end over an [`OracleBackend`]. Safe for
/// concurrent use; in-flight work is bounded by [`OracleClient::install`].
pub struct OracleClient {
    cfg: OracleConfig,
    backend: Box<dyn OracleBackend>,
    cache: Option<DiskCache>,
    dims: Mutex<HashMap<SpaceFamily, usize>>,
    backend_calls: AtomicUsize,
    cache_hits: AtomicUsize,
    pool: rayon::ThreadPool,
}

impl OracleClient {
    pub fn new(cfg: OracleConfig, backend: Box<dyn OracleBackend>, cache: Option<DiskCache>) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.max_inflight.max(1))
            .thread_name(|i| format!("oracle-{i}"))
            .build()
            .expect("oracle thread pool");
        OracleClient {
            cfg,
            backend,
            cache,
            dims: Mutex::new(HashMap::new()),
            backend_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
            pool,
        }
    }

    /// Builds the backend named by `cfg.mode`, with a disk cache at
    /// `cache_dir` when given.
    pub fn from_config(cfg: &OracleConfig, cache_dir: Option<&Path>) -> Result<Self, OracleError> {
        cfg.validate().map_err(OracleError::Protocol)?;
        let backend: Box<dyn OracleBackend> = match cfg.mode {
            OracleMode::Http => Box::new(HttpOracle::new(
                cfg.endpoint.as_deref().unwrap_or_default(),
                cfg.timeout_secs,
                cfg.retries,
            )),
            OracleMode::Fixture => Box::new(FixtureOracle::open(
                cfg.fixture_dir.as_deref().unwrap_or(Path::new(".")),
            )?),
        };
        Ok(Self::new(cfg.clone(), backend, cache_dir.map(DiskCache::new)))
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    pub fn stats(&self) -> OracleStats {
        OracleStats {
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
        }
    }

    /// Runs `f` on the client's pool, whose width is `max_inflight`.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    fn fetch(
        &self,
        req: &OracleRequest<'_>,
        postprocess: impl FnOnce(Value) -> Result<Value, OracleError>,
    ) -> Result<Value, OracleError> {
        let key = req.cache_key(&self.cfg.models);
        if let Some(cache) = &self.cache {
            if let Some(entry) = cache.get(req.kind(), &key)? {
                self.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(entry.response);
            }
        }
        self.backend_calls.fetch_add(1, Ordering::SeqCst);
        let response = postprocess(self.backend.call(req, &self.cfg.models)?)?;
        if let Some(cache) = &self.cache {
            cache.put(&CacheEntry {
                kind: req.kind(),
                key,
                subject: req.subject(),
                response: response.clone(),
            })?;
        }
        Ok(response)
    }

    fn check_dim(&self, space: SpaceId, got: usize) -> Result<(), OracleError> {
        let mut dims = self.dims.lock().expect("dimension table poisoned");
        match dims.get(&space.family()) {
            Some(&expected) if expected != got => Err(OracleError::DimensionMismatch {
                space,
                expected,
                got,
            }),
            Some(_) => Ok(()),
            None => {
                dims.insert(space.family(), got);
                Ok(())
            }
        }
    }

    fn vector(&self, req: OracleRequest<'_>, space: SpaceId) -> Result<EmbeddingVector, OracleError> {
        let kind = req.kind();
        let body: VectorBody = decode(kind, self.fetch(&req, Ok)?)?;
        let v = EmbeddingVector::normalized(body.vector, space)?;
        self.check_dim(space, v.dim())?;
        Ok(v)
    }

    pub fn detect(&self, patch: &Patch, class: &SemanticClass) -> Result<DetectionResult, OracleError> {
        let (w, h) = patch.crop.dimensions();
        let threshold = self.cfg.box_threshold;
        let req = OracleRequest::Detect {
            image: patch.into(),
            query: class.prompt_name(),
            box_threshold: threshold,
            text_threshold: self.cfg.text_threshold,
        };
        let value = self.fetch(&req, |raw| {
            let body: BoxesBody = decode(OracleKind::Detect, raw)?;
            let boxes = filter_boxes(body.boxes, threshold, w, h)?;
            Ok(json!({ "boxes": boxes, "model_id": self.cfg.models.detector }))
        })?;
        let body: BoxesBody = decode(OracleKind::Detect, value)?;
        Ok(DetectionResult {
            patch_id: patch.patch_id.clone(),
            query: class.prompt_name().to_string(),
            boxes: filter_boxes(body.boxes, threshold, w, h)?,
            detector_id: self.cfg.models.detector.clone(),
        })
    }

    pub fn embed_image(&self, patch: &Patch) -> Result<EmbeddingVector, OracleError> {
        self.vector(OracleRequest::EmbedImage(patch.into()), SpaceId::JointImage)
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, OracleError> {
        self.vector(OracleRequest::EmbedText(text), SpaceId::JointText)
    }

    pub fn encode_sentence(&self, text: &str) -> Result<EmbeddingVector, OracleError> {
        self.vector(OracleRequest::EncodeSentence(text), SpaceId::Sentence)
    }

    /// Captions are trimmed of surrounding whitespace and must be nonempty.
    pub fn caption(&self, patch: &Patch) -> Result<Caption, OracleError> {
        let req = OracleRequest::Caption(patch.into());
        let body: CaptionBody = decode(OracleKind::Caption, self.fetch(&req, Ok)?)?;
        let text = body.caption.trim();
        if text.is_empty() {
            return Err(OracleError::Protocol(format!(
                "empty caption for {}",
                patch.patch_id
            )));
        }
        Ok(Caption {
            patch_id: patch.patch_id.clone(),
            text: text.to_string(),
            captioner_id: self.cfg.models.captioner.clone(),
        })
    }
}

#[cfg(test)]
mod tests;
