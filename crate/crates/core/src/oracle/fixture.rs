//! File-backed oracle.
//!
//! A fixture directory uses the cache layout, so any fixture is also a valid
//! warm cache for the embedding and caption kinds. Detector fixtures are the
//! exception: they hold threshold-free proposals (kind `detect_proposals`)
//! that the client filters with the run's thresholds.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::cache::{cache_key, canonical_params, read_entry, CacheEntry, DiskCache};
use super::{
    image_content_hash, DetectionBox, ModelIds, OracleBackend, OracleError, OracleImage,
    OracleKind, OracleRequest,
};
use crate::artifact;

/// `fixture.json`: model ids and embedding dimensions the fixture was
/// authored for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub models: ModelIds,
    pub joint_dim: usize,
    pub sentence_dim: usize,
}

impl FixtureManifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("fixture.json")
    }
}

pub fn proposal_key(content_hash: &str, query: &str, detector_id: &str) -> String {
    cache_key(
        OracleKind::DetectProposals.as_str(),
        content_hash,
        &canonical_params(&json!({ "detector_id": detector_id, "query": query })),
    )
}

pub struct FixtureOracle {
    dir: PathBuf,
    manifest: Option<FixtureManifest>,
    accesses: AtomicUsize,
}

impl FixtureOracle {
    pub fn open(dir: &Path) -> Result<Self, OracleError> {
        if !dir.is_dir() {
            return Err(OracleError::Unavailable(format!(
                "fixture directory {} does not exist",
                dir.display()
            )));
        }
        let mpath = FixtureManifest::path(dir);
        let manifest = if mpath.exists() {
            Some(artifact::read_json(&mpath).map_err(|e| OracleError::Cache {
                path: mpath.clone(),
                reason: e.to_string(),
            })?)
        } else {
            None
        };
        Ok(FixtureOracle {
            dir: dir.to_path_buf(),
            manifest,
            accesses: AtomicUsize::new(0),
        })
    }

    pub fn manifest(&self) -> Option<&FixtureManifest> {
        self.manifest.as_ref()
    }

    /// Number of lookups served so far, hits and misses alike.
    pub fn accesses(&self) -> usize {
        self.accesses.load(Ordering::SeqCst)
    }

    fn lookup(&self, kind: OracleKind, key: &str, subject: String) -> Result<Value, OracleError> {
        self.accesses.fetch_add(1, Ordering::SeqCst);
        match read_entry(&DiskCache::path_for(&self.dir, kind, key))? {
            Some(entry) => Ok(entry.response),
            None => Err(OracleError::FixtureMiss {
                kind,
                subject,
                key: key.to_string(),
            }),
        }
    }
}

impl OracleBackend for FixtureOracle {
    fn call(&self, req: &OracleRequest<'_>, models: &ModelIds) -> Result<Value, OracleError> {
        match req {
            OracleRequest::Detect { image, query, .. } => self.lookup(
                OracleKind::DetectProposals,
                &proposal_key(image.content_hash, query, &models.detector),
                req.subject(),
            ),
            _ => self.lookup(req.kind(), &req.cache_key(models), req.subject()),
        }
    }
}

impl<T: OracleBackend + ?Sized> OracleBackend for std::sync::Arc<T> {
    fn call(&self, req: &OracleRequest<'_>, models: &ModelIds) -> Result<Value, OracleError> {
        (**self).call(req, models)
    }
}

/// Authoring helper that writes fixture entries in the lookup layout.
pub struct FixtureWriter {
    dir: PathBuf,
    models: ModelIds,
}

impl FixtureWriter {
    pub fn new(dir: impl Into<PathBuf>, models: ModelIds) -> Self {
        FixtureWriter {
            dir: dir.into(),
            models,
        }
    }

    fn put(&self, kind: OracleKind, key: String, subject: String, response: Value) -> crate::Result<()> {
        artifact::write_json(
            &DiskCache::path_for(&self.dir, kind, &key),
            &CacheEntry {
                kind,
                key,
                subject,
                response,
            },
        )
    }

    fn image<'a>(subject: &'a str, img: &'a RgbImage, hash: &'a str) -> OracleImage<'a> {
        OracleImage {
            subject,
            image: img,
            content_hash: hash,
        }
    }

    /// Raw proposals for `(image, query)`; thresholds are applied at query time.
    pub fn detections(
        &self,
        subject: &str,
        img: &RgbImage,
        query: &str,
        boxes: &[DetectionBox],
    ) -> crate::Result<()> {
        let hash = image_content_hash(img);
        self.put(
            OracleKind::DetectProposals,
            proposal_key(&hash, query, &self.models.detector),
            subject.to_string(),
            json!({ "boxes": boxes, "model_id": self.models.detector }),
        )
    }

    pub fn image_vector(&self, subject: &str, img: &RgbImage, vector: &[f64]) -> crate::Result<()> {
        let hash = image_content_hash(img);
        let req = OracleRequest::EmbedImage(Self::image(subject, img, &hash));
        self.put(
            req.kind(),
            req.cache_key(&self.models),
            req.subject(),
            json!({ "vector": vector, "model_id": self.models.joint }),
        )
    }

    pub fn caption(&self, subject: &str, img: &RgbImage, text: &str) -> crate::Result<()> {
        let hash = image_content_hash(img);
        let req = OracleRequest::Caption(Self::image(subject, img, &hash));
        self.put(
            req.kind(),
            req.cache_key(&self.models),
            req.subject(),
            json!({ "caption": text, "model_id": self.models.captioner }),
        )
    }

    pub fn text_vector(&self, text: &str, vector: &[f64]) -> crate::Result<()> {
        let req = OracleRequest::EmbedText(text);
        self.put(
            req.kind(),
            req.cache_key(&self.models),
            req.subject(),
            json!({ "vector": vector, "model_id": self.models.joint }),
        )
    }

    pub fn sentence_vector(&self, text: &str, vector: &[f64]) -> crate::Result<()> {
        let req = OracleRequest::EncodeSentence(text);
        self.put(
            req.kind(),
            req.cache_key(&self.models),
            req.subject(),
            json!({ "vector": vector, "model_id": self.models.sentence }),
        )
    }

    pub fn finish(&self, joint_dim: usize, sentence_dim: usize) -> crate::Result<()> {
        artifact::write_json(
            &FixtureManifest::path(&self.dir),
            &FixtureManifest {
                models: self.models.clone(),
                joint_dim,
                sentence_dim,
            },
        )
    }
}
