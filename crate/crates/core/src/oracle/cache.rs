//! Content-addressed response cache: one JSON file per key under
//! `<root>/<kind>/<first two hex chars>/<key>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{OracleError, OracleKind};
use crate::artifact::{self, sha256_hex};

/// Deterministic key over `(kind, content hash, canonical params)`.
pub fn cache_key(kind: &str, content_hash: &str, params: &str) -> String {
    sha256_hex(format!("{kind}\n{content_hash}\n{params}").as_bytes())
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_params(params: &Value) -> String {
    artifact::canonical_line(params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub kind: OracleKind,
    pub key: String,
    /// Patch id or quoted text; informational.
    pub subject: String,
    pub response: Value,
}

#[derive(Clone, Debug)]
pub struct DiskCache {
    root: PathBuf,
}

impl DiskCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DiskCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(root: &Path, kind: OracleKind, key: &str) -> PathBuf {
        root.join(kind.as_str())
            .join(&key[..2.min(key.len())])
            .join(format!("{key}.json"))
    }

    pub fn get(&self, kind: OracleKind, key: &str) -> Result<Option<CacheEntry>, OracleError> {
        read_entry(&Self::path_for(&self.root, kind, key))
    }

    pub fn put(&self, entry: &CacheEntry) -> Result<(), OracleError> {
        let path = Self::path_for(&self.root, entry.kind, &entry.key);
        artifact::write_json(&path, entry).map_err(|e| OracleError::Cache {
            path,
            reason: e.to_string(),
        })
    }
}

pub(crate) fn read_entry(path: &Path) -> Result<Option<CacheEntry>, OracleError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => {
            return Err(OracleError::Cache {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        }
    };
    serde_json::from_slice(&bytes)
        .map(Some)
        .map_err(|e| OracleError::Cache {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}
