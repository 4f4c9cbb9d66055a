//! Ground-truth and human-panel evaluation.
//!
//! Flagged error patches are scored with the positive procedure, kept
//! patches with the negative one; both compare the predicted and true class
//! masks inside the patch box by IoU against a strict 0.7 threshold.

mod verdicts;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detection::ErrorPatchSet;
use crate::error::{Error, Result};
use crate::patch::{BoundingBox, ClassMap, Patch, PatchSet};

pub use verdicts::{
    aggregate_verdicts, append_verdict, read_verdicts, systematic_accuracy, AggregatedVerdict,
    SystematicAccuracy, VerdictRecord, VerdictStatus,
};

/// IoU must exceed this (strictly) for the class to count as present.
pub const IOU_THRESHOLD: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch {
                expected: width as usize * height as usize,
                got: bits.len(),
            });
        }
        Ok(BinaryMask { width, height, bits })
    }

    /// Cells of `map` inside `bbox` equal to `class_index`.
    pub fn for_class(map: &ClassMap, bbox: &BoundingBox, class_index: u8) -> Self {
        let mut bits = Vec::with_capacity(bbox.area() as usize);
        for y in bbox.y0..bbox.y1 {
            for x in bbox.x0..bbox.x1 {
                bits.push(map.get(x, y) == class_index);
            }
        }
        BinaryMask {
            width: bbox.width(),
            height: bbox.height(),
            bits,
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Intersection and union sizes of two masks.
pub fn overlap(a: &BinaryMask, b: &BinaryMask) -> Result<(u64, u64)> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::DimensionMismatch {
            expected: a.bits.len(),
            got: b.bits.len(),
        });
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += u64::from(x && y);
        union += u64::from(x || y);
    }
    Ok((inter, union))
}

/// `|a ∧ b| / |a ∨ b|`, 0 for an empty union.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, union) = overlap(a, b)?;
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// `inter / union > 0.7`, decided in integers so that an IoU of exactly
/// 0.7 is never pushed across the threshold by rounding.
fn exceeds_threshold(inter: u64, union: u64) -> bool {
    union > 0 && 10 * inter > 7 * union
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Outcome {
    Tp,
    Fp,
    Fn,
    Tn,
}

fn class_overlap(patch: &Patch, pred: &ClassMap, gt: Option<&ClassMap>) -> Result<(u64, u64)> {
    let gt = gt.ok_or_else(|| Error::MissingGroundTruth {
        patch_id: patch.patch_id.clone(),
    })?;
    let b = &patch.bbox;
    for map in [pred, gt] {
        if b.x1 > map.width || b.y1 > map.height {
            return Err(Error::MissingGroundTruth {
                patch_id: patch.patch_id.clone(),
            });
        }
    }
    overlap(
        &BinaryMask::for_class(pred, b, patch.class.index),
        &BinaryMask::for_class(gt, b, patch.class.index),
    )
}

/// For a patch flagged as a precision error: a high overlap with ground
/// truth means the class really is there, so the flag was a false positive.
pub fn evaluate_positive(patch: &Patch, pred: &ClassMap, gt: Option<&ClassMap>) -> Result<Outcome> {
    let (i, u) = class_overlap(patch, pred, gt)?;
    Ok(if exceeds_threshold(i, u) { Outcome::Fp } else { Outcome::Tp })
}

/// For a patch kept as correct: a high overlap confirms it, a low one is a
/// missed error.
pub fn evaluate_negative(patch: &Patch, pred: &ClassMap, gt: Option<&ClassMap>) -> Result<Outcome> {
    let (i, u) = class_overlap(patch, pred, gt)?;
    Ok(if exceeds_threshold(i, u) { Outcome::Tn } else { Outcome::Fn })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, o: Outcome) {
        match o {
            Outcome::Tp => self.tp += 1,
            Outcome::Fp => self.fp += 1,
            Outcome::Fn => self.fn_ += 1,
            Outcome::Tn => self.tn += 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Zero denominators yield 0 for precision, recall and F1.
pub fn confusion_metrics(c: &ConfusionCounts) -> Result<Metrics> {
    if c.total() == 0 {
        return Err(Error::EmptyCounts);
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f1,
    })
}

/// Ground-truth evaluation of one class's detections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvaluation {
    pub counts: ConfusionCounts,
    /// Patches whose image has no ground-truth map; not counted.
    pub excluded_missing_gt: Vec<String>,
}

/// Predicted and optional true class maps, keyed by image id.
pub type MapTable = HashMap<String, (ClassMap, Option<ClassMap>)>;

pub fn evaluate_detections(patches: &PatchSet, errors: &ErrorPatchSet, maps: &MapTable) -> Result<DetectionEvaluation> {
    let mut out = DetectionEvaluation::default();
    for p in &patches.patches {
        let (pred, gt) = maps
            .get(&p.image_id)
            .ok_or_else(|| Error::Config(format!("no class maps for image {}", p.image_id)))?;
        let outcome = if errors.contains(&p.patch_id) {
            evaluate_positive(p, pred, gt.as_ref())
        } else {
            evaluate_negative(p, pred, gt.as_ref())
        };
        match outcome {
            Ok(o) => out.counts.add(o),
            Err(Error::MissingGroundTruth { patch_id }) => out.excluded_missing_gt.push(patch_id),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub dataset_id: String,
    pub class: String,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ColumnKey {
    pub detector_id: String,
    pub ssm_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub row: RowKey,
    pub column: ColumnKey,
    pub counts: ConfusionCounts,
    /// `None` when every count is zero.
    pub metrics: Option<Metrics>,
}

/// Rows are dataset x class, columns detector x segmentation model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricGrid {
    pub rows: Vec<RowKey>,
    pub columns: Vec<ColumnKey>,
    /// Row-major over `rows` x `columns`, only for filled cells.
    pub cells: Vec<GridCell>,
}

impl MetricGrid {
    pub fn from_counts(counts: BTreeMap<(RowKey, ColumnKey), ConfusionCounts>) -> Self {
        let mut rows: Vec<RowKey> = counts.keys().map(|k| k.0.clone()).collect();
        let mut columns: Vec<ColumnKey> = counts.keys().map(|k| k.1.clone()).collect();
        rows.dedup();
        columns.sort();
        columns.dedup();
        let cells = counts
            .into_iter()
            .map(|((row, column), counts)| GridCell {
                row,
                column,
                metrics: confusion_metrics(&counts).ok(),
                counts,
            })
            .collect();
        MetricGrid { rows, columns, cells }
    }

    pub fn cell(&self, row: &RowKey, column: &ColumnKey) -> Option<&GridCell> {
        self.cells.iter().find(|c| &c.row == row && &c.column == column)
    }

    /// Whether every cell's metrics recompute exactly from its counts.
    pub fn is_consistent(&self) -> bool {
        self.cells
            .iter()
            .all(|c| confusion_metrics(&c.counts).ok() == c.metrics)
    }

    /// Table-shaped CSV: one line per row key, one accuracy column (in
    /// percent, two decimals) per column key. Empty cells are blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,class");
        for c in &self.columns {
            let _ = write!(out, ",{}/{}", c.detector_id, c.ssm_id);
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.dataset_id, r.class);
            for c in &self.columns {
                out.push(',');
                if let Some(m) = self.cell(r, c).and_then(|cell| cell.metrics) {
                    let _ = write!(out, "{:.2}", m.accuracy * 100.0);
                }
            }
            out.push('\n');
        }
        out
    }
}
