//! Exact cosine k-NN over joint-space image embeddings of error patches.
//!
//! The index is a dense row-major `f32` matrix, persisted as raw
//! little-endian floats plus a JSON sidecar. Queries are a linear scan;
//! error sets are small enough that exactness costs nothing.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, sha256_hex};
use crate::detection::ErrorPatchSet;
use crate::error::{Error, Result};
use crate::oracle::{EmbeddingVector, OracleClient, SpaceId};
use crate::patch::PatchSet;

/// Cosine similarity of two vectors from comparable spaces, clamped to
/// `[-1, 1]`.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.space_id.family() != v.space_id.family() {
        return Err(Error::SpaceMismatch {
            left: u.space_id.to_string(),
            right: v.space_id.to_string(),
        });
    }
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            got: v.dim(),
        });
    }
    cosine_slices(&u.values, &v.values).ok_or(Error::ZeroVector)
}

/// Unchecked-dimension cosine; `None` when either side has zero norm.
pub fn cosine_slices(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    /// Ascending.
    pub ids: Vec<String>,
    pub dim: usize,
    /// Row-major, one unit-norm row per id.
    pub data: Vec<f32>,
    pub space_id: SpaceId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackedMeta {
    pub ids: Vec<String>,
    pub dim: usize,
    pub space_id: SpaceId,
    pub count: usize,
    pub sha256: String,
}

const UNIT_TOLERANCE: f64 = 1e-6;

impl EmbeddingMatrix {
    /// Assembles a matrix from `(id, vector)` rows; rows are sorted by id.
    pub fn from_rows(space_id: SpaceId, mut rows: Vec<(String, EmbeddingVector)>) -> Result<Self> {
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let dim = rows.first().map(|r| r.1.dim()).unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, v) in rows {
            if v.space_id != space_id {
                return Err(Error::SpaceMismatch {
                    left: space_id.to_string(),
                    right: v.space_id.to_string(),
                });
            }
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.dim(),
                });
            }
            if ids.last() == Some(&id) {
                return Err(Error::Config(format!("duplicate index id {id}")));
            }
            let norm = if v.normalized { 1.0 } else { v.norm() };
            if norm == 0.0 || v.values.iter().all(|&x| x == 0.0) {
                return Err(Error::ZeroVector);
            }
            data.extend(v.values.iter().map(|x| (x / norm) as f32));
            ids.push(id);
        }
        Ok(EmbeddingMatrix {
            ids,
            dim,
            data,
            space_id,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|x| x.as_str().cmp(id)).ok()
    }

    pub fn vector(&self, id: &str) -> Option<EmbeddingVector> {
        self.position(id).map(|i| EmbeddingVector {
            values: self.row(i).iter().map(|&x| f64::from(x)).collect(),
            space_id: self.space_id,
            normalized: true,
        })
    }

    pub fn data_path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.f32le"))
    }

    pub fn meta_path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.meta.json"))
    }

    fn raw_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    /// Writes `<name>.f32le` and `<name>.meta.json` into `dir`.
    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        let raw = self.raw_bytes();
        artifact::write_atomic(&Self::data_path(dir, name), &raw)?;
        artifact::write_json(
            &Self::meta_path(dir, name),
            &PackedMeta {
                ids: self.ids.clone(),
                dim: self.dim,
                space_id: self.space_id,
                count: self.ids.len(),
                sha256: sha256_hex(&raw),
            },
        )
    }

    pub fn read(dir: &Path, name: &str) -> Result<Self> {
        let meta: PackedMeta = artifact::read_json(&Self::meta_path(dir, name))?;
        let path = Self::data_path(dir, name);
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |reason: String| Error::PackedFormat {
            path: path.clone(),
            reason,
        };
        if sha256_hex(&raw) != meta.sha256 {
            return Err(bad("sha256 does not match meta".into()));
        }
        if meta.count != meta.ids.len() || raw.len() != meta.count * meta.dim * 4 {
            return Err(bad(format!(
                "{} bytes for {} rows of dim {}",
                raw.len(),
                meta.count,
                meta.dim
            )));
        }
        if meta.ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("ids are not strictly ascending".into()));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let m = EmbeddingMatrix {
            ids: meta.ids,
            dim: meta.dim,
            data,
            space_id: meta.space_id,
        };
        for i in 0..m.len() {
            let n = m.row(i).iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(bad(format!("row {i} has norm {n}")));
            }
        }
        Ok(m)
    }
}

/// Embeds every error patch with the joint-space image embedder.
pub fn build_index(
    errors: &ErrorPatchSet,
    patches: &PatchSet,
    oracle: &OracleClient,
) -> Result<EmbeddingMatrix> {
    if errors.error_patch_ids.is_empty() {
        return Err(Error::EmptyErrorSet {
            class: errors.class.name.clone(),
        });
    }
    let rows = oracle.install(|| {
        errors
            .error_patch_ids
            .par_iter()
            .map(|id| {
                let patch = patches.get(id).ok_or_else(|| {
                    Error::Config(format!("error patch {id} missing from patch set"))
                })?;
                let v = oracle
                    .embed_image(patch)
                    .map_err(|e| Error::oracle(format!("embed_image {id}"), e))?;
                Ok((id.clone(), v))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    EmbeddingMatrix::from_rows(SpaceId::JointImage, rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborList {
    pub query_id: String,
    pub neighbor_ids: Vec<String>,
    pub similarities: Vec<f64>,
}

fn rank(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    // ids are sorted, so row index order is id order.
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// The `min(q, n - 1)` rows most cosine-similar to `query_id`, excluding the
/// query itself. Ties go to the lower patch id.
pub fn knn(index: &EmbeddingMatrix, query_id: &str, q: usize) -> Result<NeighborList> {
    let qi = index
        .position(query_id)
        .ok_or_else(|| Error::UnknownQueryId(query_id.to_string()))?;
    let query: Vec<f64> = index.row(qi).iter().map(|&x| f64::from(x)).collect();
    let mut scored: Vec<(f64, usize)> = (0..index.len())
        .filter(|&i| i != qi)
        .map(|i| {
            let row: Vec<f64> = index.row(i).iter().map(|&x| f64::from(x)).collect();
            (cosine_slices(&query, &row).unwrap_or(0.0), i)
        })
        .collect();
    let k = q.min(scored.len());
    if k > 0 && k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank);
    }
    scored.truncate(k);
    scored.sort_by(rank);
    Ok(NeighborList {
        query_id: query_id.to_string(),
        neighbor_ids: scored.iter().map(|&(_, i)| index.ids[i].clone()).collect(),
        similarities: scored.iter().map(|&(s, _)| s).collect(),
    })
}
