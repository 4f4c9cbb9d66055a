use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MetricsReport, Pipeline, PipelineOptions, RunConfig, RunLock, VERDICTS};
use crate::artifact;
use crate::error::{Error, Result};
use crate::oracle::OracleBackend;

/// Produces a fresh backend for each sweep cell.
pub type BackendFactory<'a> = &'a (dyn Fn() -> Box<dyn OracleBackend> + Sync);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub min_patch_size: u32,
    pub q: usize,
    /// Relative to the base run directory.
    pub run_dir: PathBuf,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub entries: Vec<SweepEntry>,
}

impl SweepSummary {
    pub fn get(&self, min_patch_size: u32, q: usize) -> Option<&SweepEntry> {
        self.entries
            .iter()
            .find(|e| e.min_patch_size == min_patch_size && e.q == q)
    }
}

fn copy_verdicts(from: &Path, to: &Path) -> Result<()> {
    let Ok(entries) = fs::read_dir(from) else {
        return Ok(());
    };
    fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    for e in entries.flatten() {
        let p = e.path();
        if p.extension().is_some_and(|x| x == "jsonl") {
            let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
            artifact::write_atomic(&to.join(e.file_name()), &bytes)?;
        }
    }
    Ok(())
}

/// Runs the full pipeline once per `(min_size, q)` pair under
/// `<run_dir>/sweep/a<min_size>_q<q>`, all sharing `cache_dir`, and writes
/// `<run_dir>/sweep/summary.json`. Verdicts in the base run are copied into
/// every cell.
pub fn sweep(
    base: &RunConfig,
    min_sizes: &[u32],
    qs: &[usize],
    cache_dir: &Path,
    backend: Option<BackendFactory<'_>>,
) -> Result<SweepSummary> {
    if min_sizes.is_empty() || qs.is_empty() {
        return Err(Error::Config("sweep needs at least one min size and one q".into()));
    }
    let _lock = RunLock::acquire(&base.run_dir)?;
    let mut entries = Vec::new();
    for &a in min_sizes {
        for &q in qs {
            let rel = PathBuf::from("sweep").join(format!("a{a}_q{q}"));
            let mut cfg = base.clone();
            cfg.min_patch_size = a;
            cfg.q = q;
            cfg.run_dir = base.run_dir.join(&rel);
            copy_verdicts(&base.run_dir.join(VERDICTS), &cfg.run_dir.join(VERDICTS))?;
            log::info!("sweep cell min_size={a} q={q}");
            let pipeline = Pipeline::open(
                cfg,
                PipelineOptions {
                    cache_dir: Some(cache_dir.to_path_buf()),
                    backend: backend.map(|f| f()),
                    gt_manifest: None,
                },
            )?;
            pipeline.run_all()?;
            let metrics: MetricsReport =
                artifact::read_json(&pipeline.run_dir().join(super::METRICS_JSON))?;
            entries.push(SweepEntry {
                min_patch_size: a,
                q,
                run_dir: rel,
                metrics,
            });
        }
    }
    let summary = SweepSummary { entries };
    artifact::write_json(&base.run_dir.join("sweep").join("summary.json"), &summary)?;
    Ok(summary)
}
