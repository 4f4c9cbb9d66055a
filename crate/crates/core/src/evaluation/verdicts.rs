//! Human verdicts on predicted systematic errors.
//!
//! Each evaluator owns `verdicts/<evaluator_id>.jsonl`. A verdict is the
//! conjunction of three conditions: the query patch shows a concept other
//! than the class, its neighbors show the same concept, and the caption
//! describes it adequately.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{confusion_metrics, ConfusionCounts, Metrics};
use crate::artifact::{canonical_line, read_jsonl};
use crate::error::{Error, Result};
use crate::systematicity::SystematicityScore;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub patch_id: String,
    pub evaluator_id: String,
    pub cond_concept_not_cj: bool,
    pub cond_neighbors_same_concept: bool,
    pub cond_caption_adequate: bool,
    pub verdict: bool,
    /// RFC 3339.
    pub timestamp: String,
}

impl VerdictRecord {
    pub fn new(
        patch_id: impl Into<String>,
        evaluator_id: impl Into<String>,
        conditions: [bool; 3],
        timestamp: impl Into<String>,
    ) -> Self {
        VerdictRecord {
            patch_id: patch_id.into(),
            evaluator_id: evaluator_id.into(),
            cond_concept_not_cj: conditions[0],
            cond_neighbors_same_concept: conditions[1],
            cond_caption_adequate: conditions[2],
            verdict: conditions.iter().all(|&c| c),
            timestamp: timestamp.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let and = self.cond_concept_not_cj && self.cond_neighbors_same_concept && self.cond_caption_adequate;
        if self.verdict != and {
            return Err(Error::InvalidVerdict(format!(
                "{} by {}: verdict {} but conditions AND to {and}",
                self.patch_id, self.evaluator_id, self.verdict
            )));
        }
        if self.evaluator_id.is_empty() || self.patch_id.is_empty() {
            return Err(Error::InvalidVerdict("empty patch or evaluator id".into()));
        }
        Ok(())
    }
}

fn verdict_path(dir: &Path, evaluator_id: &str) -> Result<PathBuf> {
    if evaluator_id.is_empty()
        || evaluator_id.starts_with('.')
        || evaluator_id.contains(['/', '\\'])
    {
        return Err(Error::InvalidVerdict(format!("unusable evaluator id {evaluator_id:?}")));
    }
    Ok(dir.join(format!("{evaluator_id}.jsonl")))
}

/// Appends one record to its evaluator's file.
pub fn append_verdict(dir: &Path, record: &VerdictRecord) -> Result<()> {
    record.validate()?;
    let path = verdict_path(dir, &record.evaluator_id)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let line = canonical_line(record) + "\n";
    f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))
}

/// Reads every `*.jsonl` file in `dir`, checking that records sit in their
/// evaluator's file and satisfy the conjunction rule. A missing directory
/// holds no verdicts.
pub fn read_verdicts(dir: &Path) -> Result<Vec<VerdictRecord>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        for r in read_jsonl::<VerdictRecord>(&f)? {
            r.validate()?;
            if r.evaluator_id != stem {
                return Err(Error::InvalidVerdict(format!(
                    "{} holds a record by {}",
                    f.display(),
                    r.evaluator_id
                )));
            }
            out.push(r);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Decided,
    /// Fewer panelists than the quorum judged the patch.
    Incomplete,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatedVerdict {
    pub status: VerdictStatus,
    /// Majority outcome; `None` while incomplete.
    pub verdict: Option<bool>,
    pub votes_true: usize,
    pub votes: usize,
}

/// Majority vote per patch among the panel: true when at least
/// `ceil(|panel| / 2)` panelists said true. Patches judged by fewer than
/// `quorum` panelists (default: the whole panel) stay undecided. Records by
/// evaluators outside the panel are ignored.
pub fn aggregate_verdicts(
    records: &[VerdictRecord],
    panel: &[String],
    quorum: Option<usize>,
) -> Result<BTreeMap<String, AggregatedVerdict>> {
    let panel_set: HashSet<&str> = panel.iter().map(String::as_str).collect();
    if panel_set.is_empty() || panel_set.len() != panel.len() {
        return Err(Error::Config("panel must list distinct evaluators".into()));
    }
    let quorum = quorum.unwrap_or(panel.len());
    if quorum == 0 || quorum > panel.len() {
        return Err(Error::Config(format!("quorum {quorum} outside 1..={}", panel.len())));
    }
    let needed = panel.len().div_ceil(2);

    let mut seen = HashSet::new();
    let mut tallies: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in records {
        if !panel_set.contains(r.evaluator_id.as_str()) {
            continue;
        }
        if !seen.insert((r.patch_id.as_str(), r.evaluator_id.as_str())) {
            return Err(Error::DuplicateVerdict {
                patch_id: r.patch_id.clone(),
                evaluator_id: r.evaluator_id.clone(),
            });
        }
        let t = tallies.entry(r.patch_id.clone()).or_default();
        t.0 += usize::from(r.verdict);
        t.1 += 1;
    }
    Ok(tallies
        .into_iter()
        .map(|(id, (yes, n))| {
            let decided = n >= quorum;
            (
                id,
                AggregatedVerdict {
                    status: if decided {
                        VerdictStatus::Decided
                    } else {
                        VerdictStatus::Incomplete
                    },
                    verdict: decided.then_some(yes >= needed),
                    votes_true: yes,
                    votes: n,
                },
            )
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystematicAccuracy {
    pub predicted_systematic: usize,
    pub confirmed: usize,
    /// Confirmed share of predicted systematic patches; `None` when nothing
    /// was predicted.
    pub paper_style_accuracy: Option<f64>,
    /// Over every scored patch with a decided verdict: positive means
    /// predicted systematic, truth is the panel's verdict.
    pub full_confusion: ConfusionCounts,
    pub full_metrics: Option<Metrics>,
    pub note: Option<String>,
}

pub fn systematic_accuracy(
    scores: &[SystematicityScore],
    verdicts: &BTreeMap<String, AggregatedVerdict>,
) -> Result<SystematicAccuracy> {
    let mut counts = ConfusionCounts::default();
    let (mut predicted, mut confirmed) = (0, 0);
    for s in scores {
        let decided = verdicts.get(&s.patch_id).and_then(|v| v.verdict);
        match (s.is_systematic(), decided) {
            (true, None) => {
                return Err(Error::UncoveredPrediction {
                    patch_id: s.patch_id.clone(),
                })
            }
            (true, Some(v)) => {
                predicted += 1;
                if v {
                    confirmed += 1;
                    counts.tp += 1;
                } else {
                    counts.fp += 1;
                }
            }
            (false, Some(true)) => counts.fn_ += 1,
            (false, Some(false)) => counts.tn += 1,
            (false, None) => {}
        }
    }
    Ok(SystematicAccuracy {
        predicted_systematic: predicted,
        confirmed,
        paper_style_accuracy: (predicted > 0).then(|| confirmed as f64 / predicted as f64),
        full_confusion: counts,
        full_metrics: confusion_metrics(&counts).ok(),
        note: (predicted == 0).then(|| "no patches were predicted systematic".to_string()),
    })
}
