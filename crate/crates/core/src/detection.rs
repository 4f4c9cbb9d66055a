//! Precision-error classification: a patch predicted as class `c` is an
//! error when the open-vocabulary detector finds no `c` in it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{DetectionResult, OracleClient};
use crate::patch::{PatchSet, SemanticClass};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPatchSet {
    pub class: SemanticClass,
    /// Ascending.
    pub error_patch_ids: Vec<String>,
    pub detector_id: String,
    pub box_threshold: f64,
    pub text_threshold: Option<f64>,
}

impl ErrorPatchSet {
    pub fn contains(&self, patch_id: &str) -> bool {
        self.error_patch_ids
            .binary_search_by(|x| x.as_str().cmp(patch_id))
            .is_ok()
    }
}

/// Derives the error set from already computed detections.
pub fn errors_from_detections(
    class: &SemanticClass,
    detections: &[DetectionResult],
    detector_id: &str,
    box_threshold: f64,
    text_threshold: Option<f64>,
) -> ErrorPatchSet {
    let mut ids: Vec<String> = detections
        .iter()
        .filter(|d| d.is_empty())
        .map(|d| d.patch_id.clone())
        .collect();
    ids.sort();
    ids.dedup();
    ErrorPatchSet {
        class: class.clone(),
        error_patch_ids: ids,
        detector_id: detector_id.to_string(),
        box_threshold,
        text_threshold,
    }
}

/// Queries the detector on every patch. Returns the error set and every
/// detection result, in patch id order. Any oracle failure aborts the whole
/// call; a patch is never marked as an error because its detection failed.
pub fn classify_precision_errors(
    patches: &PatchSet,
    oracle: &OracleClient,
) -> Result<(ErrorPatchSet, Vec<DetectionResult>)> {
    let detections = oracle.install(|| {
        patches
            .patches
            .par_iter()
            .map(|p| {
                oracle
                    .detect(p, &patches.class)
                    .map_err(|e| Error::oracle(format!("detect {}", p.patch_id), e))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let cfg = oracle.config();
    let errors = errors_from_detections(
        &patches.class,
        &detections,
        &cfg.models.detector,
        cfg.box_threshold,
        cfg.text_threshold,
    );
    Ok((errors, detections))
}
