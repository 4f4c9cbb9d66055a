//! Stage orchestration over a run directory.
//!
//! ```text
//! extract -> detect -> embed   -> score -> evaluate
//!                   \-> caption -/      \-> report
//! ```
//!
//! The run directory is the only state. Each stage writes its outputs
//! atomically and records their hashes in `state.json`; a stage whose
//! outputs still match and whose inputs are unchanged is skipped.

mod config;
mod report;
mod state;
mod sweep;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, canonical_line, sha256_file, sha256_hex};
use crate::detection::{classify_precision_errors, ErrorPatchSet};
use crate::error::{Error, Result};
use crate::evaluation::{
    aggregate_verdicts, evaluate_detections, read_verdicts, systematic_accuracy, ColumnKey,
    MapTable, MetricGrid, RowKey, SystematicAccuracy,
};
use crate::index::{build_index, EmbeddingMatrix};
use crate::oracle::{Caption, DetectionResult, OracleBackend, OracleClient, OracleStats};
use crate::patch::{read_manifest, ManifestEntry, PatchSet, SegmentationRecord};
use crate::systematicity::{
    score_all, ClassPrompt, Identity, ScoreContext, ScoreParams, SystematicSet, SystematicityScore,
};

pub use config::RunConfig;
pub use report::{build_report, render_html, Report, ReportGroup, ReportNeighbor};
pub use state::{RunLock, RunState, Stage, StageRecord, StageStatus};
pub use sweep::{sweep, BackendFactory, SweepEntry, SweepSummary};

/// Environment variable overriding the oracle cache location.
pub const CACHE_DIR_ENV: &str = "AUDITOR_CACHE_DIR";

pub const MANIFEST: &str = "manifest.jsonl";
pub const DETECTIONS: &str = "detections.jsonl";
pub const ERRORS: &str = "errors.json";
pub const EMBEDDINGS: &str = "embeddings";
pub const CAPTIONS: &str = "captions.jsonl";
pub const SCORES: &str = "scores.jsonl";
pub const SYSTEMATIC: &str = "systematic.json";
pub const METRICS_JSON: &str = "eval/metrics.json";
pub const METRICS_CSV: &str = "eval/metrics.csv";
pub const SYSTEMATIC_CSV: &str = "eval/systematic.csv";
pub const REPORT_JSON: &str = "report/report.json";
pub const REPORT_HTML: &str = "report/index.html";
pub const VERDICTS: &str = "verdicts";

/// `AUDITOR_CACHE_DIR` if set, else `<run_dir>/cache`.
pub fn default_cache_dir(run_dir: &Path) -> PathBuf {
    std::env::var_os(CACHE_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| run_dir.join("cache"))
}

#[derive(Default)]
pub struct PipelineOptions {
    /// Defaults to [`default_cache_dir`].
    pub cache_dir: Option<PathBuf>,
    /// Replaces the backend named by the config (tests, instrumentation).
    pub backend: Option<Box<dyn OracleBackend>>,
    /// Ground-truth manifest overriding the config's, for evaluation only.
    pub gt_manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystematicClassResult {
    pub row: RowKey,
    pub column: ColumnKey,
    /// `ok`, or why no accuracy could be computed.
    pub status: String,
    pub result: Option<SystematicAccuracy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystematicReport {
    pub panel: Vec<String>,
    pub quorum: usize,
    /// Judged by fewer panelists than the quorum.
    pub incomplete_patch_ids: Vec<String>,
    pub classes: Vec<SystematicClassResult>,
}

/// Contents of `eval/metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Precision-error detection against ground truth.
    pub precision_errors: MetricGrid,
    /// Class name to ids of patches without ground truth.
    pub excluded_missing_gt: BTreeMap<String, Vec<String>>,
    /// Systematic-error accuracy against the human panel; `None` without
    /// verdicts.
    pub systematic: Option<SystematicReport>,
}

pub struct Pipeline {
    cfg: RunConfig,
    cache_dir: PathBuf,
    gt_manifest: Option<PathBuf>,
    backend: Mutex<Option<Box<dyn OracleBackend>>>,
    client: OnceLock<OracleClient>,
    _lock: RunLock,
}

struct StageOutput {
    files: Vec<String>,
    notes: Vec<String>,
}

impl Pipeline {
    /// Claims `cfg.run_dir` and records the config there. Resuming a
    /// directory created with a different config is refused.
    pub fn open(cfg: RunConfig, opts: PipelineOptions) -> Result<Self> {
        cfg.validate()?;
        let lock = RunLock::acquire(&cfg.run_dir)?;
        let path = cfg.path();
        if path.exists() {
            let stored: serde_json::Value = artifact::read_json(&path)?;
            if stored != artifact::canonical_value(&cfg) {
                return Err(Error::ConfigMismatch(cfg.run_dir.clone()));
            }
        } else {
            artifact::write_json(&path, &cfg)?;
        }
        let cache_dir = opts.cache_dir.unwrap_or_else(|| default_cache_dir(&cfg.run_dir));
        let gt_manifest = opts.gt_manifest.or_else(|| cfg.gt_manifest_path.clone());
        Ok(Pipeline {
            cfg,
            cache_dir,
            gt_manifest,
            backend: Mutex::new(opts.backend),
            client: OnceLock::new(),
            _lock: lock,
        })
    }

    /// Reopens an existing run directory from its recorded config.
    pub fn resume(run_dir: &Path, opts: PipelineOptions) -> Result<Self> {
        let path = run_dir.join("config.json");
        if !path.exists() {
            return Err(Error::Config(format!("{} has no config.json", run_dir.display())));
        }
        let cfg: RunConfig = artifact::read_json(&path)?;
        let same = |a: &Path, b: &Path| match (a.canonicalize(), b.canonicalize()) {
            (Ok(x), Ok(y)) => x == y,
            _ => a == b,
        };
        if !same(&cfg.run_dir, run_dir) {
            return Err(Error::Config(format!(
                "{} records run_dir {}; the directory was moved",
                path.display(),
                cfg.run_dir.display()
            )));
        }
        Self::open(cfg, opts)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn run_dir(&self) -> &Path {
        &self.cfg.run_dir
    }

    pub fn cache_dir(&self) -> &Path {
        &self.cache_dir
    }

    pub fn oracle_stats(&self) -> OracleStats {
        self.client.get().map(OracleClient::stats).unwrap_or_default()
    }

    pub fn state(&self) -> Result<RunState> {
        RunState::load(self.run_dir())
    }

    fn client(&self) -> Result<&OracleClient> {
        if let Some(c) = self.client.get() {
            return Ok(c);
        }
        let injected = self.backend.lock().expect("backend slot poisoned").take();
        let client = match injected {
            Some(b) => OracleClient::new(
                self.cfg.oracle.clone(),
                b,
                Some(crate::oracle::DiskCache::new(&self.cache_dir)),
            ),
            None => OracleClient::from_config(&self.cfg.oracle, Some(&self.cache_dir))
                .map_err(|e| Error::oracle("opening oracle backend", e))?,
        };
        Ok(self.client.get_or_init(|| client))
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<RunState> {
        let mut state = RunState::default();
        for s in Stage::ALL {
            state = self.run_stage(s)?;
        }
        Ok(state)
    }

    fn external_inputs(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        let mut add = |label: String, path: &Path| -> Result<()> {
            out.insert(label, sha256_file(path)?);
            Ok(())
        };
        match stage {
            Stage::Extract => add("manifest".into(), &self.cfg.manifest_path)?,
            Stage::Evaluate => {
                if let Some(gt) = &self.gt_manifest {
                    add(format!("gt_manifest:{}", gt.display()), gt)?;
                }
                let dir = self.run_dir().join(VERDICTS);
                if let Ok(entries) = std::fs::read_dir(&dir) {
                    let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
                    files.sort();
                    for f in files.iter().filter(|p| p.extension().is_some_and(|x| x == "jsonl")) {
                        let name = f.file_name().unwrap_or_default().to_string_lossy();
                        add(format!("verdicts/{name}"), f)?;
                    }
                }
            }
            _ => {}
        }
        Ok(out)
    }

    fn fingerprint(&self, stage: Stage, state: &RunState) -> Result<String> {
        let upstream: BTreeMap<&str, &BTreeMap<String, String>> = stage
            .ancestors()
            .into_iter()
            .filter_map(|s| state.stages.get(&s).map(|r| (s.as_str(), &r.outputs)))
            .collect();
        let value = serde_json::json!({
            "stage": stage,
            "config": &self.cfg,
            "upstream": upstream,
            "external": self.external_inputs(stage)?,
        });
        Ok(sha256_hex(canonical_line(&value).as_bytes()))
    }

    fn is_current(&self, stage: Stage, state: &RunState) -> Result<bool> {
        if !state.is_done(self.run_dir(), stage) {
            return Ok(false);
        }
        Ok(state.stages[&stage].input_fingerprint == self.fingerprint(stage, state)?)
    }

    /// Runs one stage. Upstream stages must be done and current.
    pub fn run_stage(&self, stage: Stage) -> Result<RunState> {
        let run_dir = self.run_dir().to_path_buf();
        let mut state = RunState::load(&run_dir)?;
        for &dep in stage.deps() {
            if !self.is_current(dep, &state)? {
                return Err(Error::StageDependencyMissing {
                    stage: stage.to_string(),
                    missing: dep.to_string(),
                });
            }
        }
        let fingerprint = self.fingerprint(stage, &state)?;
        if self.is_current(stage, &state)? {
            log::info!("{stage}: up to date");
            return Ok(state);
        }
        log::info!("{stage}: running");
        let before = self.oracle_stats();
        let started = Instant::now();
        let result = match stage {
            Stage::Extract => self.extract(),
            Stage::Detect => self.detect(),
            Stage::Embed => self.embed(),
            Stage::Caption => self.caption(),
            Stage::Score => self.score(),
            Stage::Evaluate => self.evaluate().map(|(_, out)| out),
            Stage::Report => self.report(),
        };
        let after = self.oracle_stats();
        let oracle = (after != before).then(|| OracleStats {
            backend_calls: after.backend_calls - before.backend_calls,
            cache_hits: after.cache_hits - before.cache_hits,
        });
        let wall_ms = started.elapsed().as_millis() as u64;
        match result {
            Ok(out) => {
                let mut outputs = BTreeMap::new();
                for rel in out.files {
                    let hash = sha256_file(&run_dir.join(&rel))?;
                    outputs.insert(rel, hash);
                }
                state.stages.insert(
                    stage,
                    StageRecord {
                        status: StageStatus::Done,
                        outputs,
                        input_fingerprint: fingerprint,
                        wall_ms,
                        notes: out.notes,
                        error: None,
                        oracle,
                    },
                );
                state.save(&run_dir)?;
                Ok(state)
            }
            Err(e) => {
                state.stages.insert(
                    stage,
                    StageRecord {
                        status: StageStatus::Failed,
                        input_fingerprint: fingerprint,
                        wall_ms,
                        error: Some(e.to_string()),
                        oracle,
                        ..Default::default()
                    },
                );
                state.save(&run_dir)?;
                Err(e)
            }
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.run_dir().join(rel)
    }

    fn read_errors(&self) -> Result<Vec<ErrorPatchSet>> {
        artifact::read_json(&self.path(ERRORS))
    }

    fn read_captions(&self) -> Result<BTreeMap<String, String>> {
        let caps: Vec<Caption> = artifact::read_jsonl(&self.path(CAPTIONS))?;
        Ok(caps.into_iter().map(|c| (c.patch_id, c.text)).collect())
    }

    pub fn read_scores(&self) -> Result<Vec<SystematicityScore>> {
        artifact::read_jsonl(&self.path(SCORES))
    }

    fn extract(&self) -> Result<StageOutput> {
        let cfg = &self.cfg;
        let entries = read_manifest(&cfg.manifest_path)?;
        if entries.is_empty() {
            return Err(Error::RejectedEmptyManifest);
        }
        let records: Vec<SegmentationRecord> = entries
            .par_iter()
            .map(|e| SegmentationRecord::load(e, cfg.num_classes, false))
            .collect::<Result<_>>()?;
        let mut files = vec![MANIFEST.to_string()];
        let mut notes = Vec::new();
        for class in &cfg.classes {
            let set = crate::patch::build_patch_set(
                &records,
                &cfg.manifest_path,
                class,
                cfg.min_patch_size,
                cfg.connectivity,
            )?;
            set.write(self.run_dir())?;
            notes.push(format!("{}: {} patches", class.name, set.patches.len()));
            let rel = format!("patches/{}", class.name);
            files.push(format!("{rel}/patchset.json"));
            files.push(format!("{rel}/metadata.jsonl"));
        }
        artifact::write_jsonl(&self.path(MANIFEST), &entries)?;
        Ok(StageOutput { files, notes })
    }

    fn detect(&self) -> Result<StageOutput> {
        let client = self.client()?;
        let mut detections: Vec<DetectionResult> = Vec::new();
        let mut sets = Vec::new();
        let mut notes = Vec::new();
        for class in &self.cfg.classes {
            let patches = PatchSet::read(self.run_dir(), class)?;
            let (errors, dets) = classify_precision_errors(&patches, client)?;
            notes.push(format!(
                "{}: {} of {} patches are precision errors",
                class.name,
                errors.error_patch_ids.len(),
                patches.patches.len()
            ));
            detections.extend(dets);
            sets.push(errors);
        }
        detections.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
        artifact::write_jsonl(&self.path(DETECTIONS), &detections)?;
        artifact::write_json(&self.path(ERRORS), &sets)?;
        Ok(StageOutput {
            files: vec![DETECTIONS.into(), ERRORS.into()],
            notes,
        })
    }

    fn embed(&self) -> Result<StageOutput> {
        let client = self.client()?;
        let dir = self.path(EMBEDDINGS);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut out = StageOutput {
            files: Vec::new(),
            notes: Vec::new(),
        };
        for errors in self.read_errors()? {
            let name = &errors.class.name;
            if errors.error_patch_ids.is_empty() {
                out.notes.push(format!("{name}: no error patches, nothing to index"));
                continue;
            }
            let patches = PatchSet::read(self.run_dir(), &errors.class)?;
            let m = build_index(&errors, &patches, client)?;
            m.write(&dir, name)?;
            out.files.push(format!("{EMBEDDINGS}/{name}.f32le"));
            out.files.push(format!("{EMBEDDINGS}/{name}.meta.json"));
        }
        Ok(out)
    }

    fn caption(&self) -> Result<StageOutput> {
        let client = self.client()?;
        let mut captions: Vec<Caption> = Vec::new();
        for errors in self.read_errors()? {
            if errors.error_patch_ids.is_empty() {
                continue;
            }
            let patches = PatchSet::read(self.run_dir(), &errors.class)?;
            let caps = client.install(|| {
                errors
                    .error_patch_ids
                    .par_iter()
                    .map(|id| {
                        let p = patches.get(id).ok_or_else(|| {
                            Error::Config(format!("error patch {id} missing from patch set"))
                        })?;
                        client
                            .caption(p)
                            .map_err(|e| Error::oracle(format!("caption {id}"), e))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            captions.extend(caps);
        }
        captions.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
        artifact::write_jsonl(&self.path(CAPTIONS), &captions)?;
        Ok(StageOutput {
            files: vec![CAPTIONS.into()],
            notes: Vec::new(),
        })
    }

    fn score(&self) -> Result<StageOutput> {
        let cfg = &self.cfg;
        let client = self.client()?;
        let captions = self.read_captions()?;
        let params = ScoreParams {
            q: cfg.q,
            alpha: cfg.alpha,
            sigma1_query: cfg.sigma1_query,
        };
        let mut scores = Vec::new();
        let mut notes = Vec::new();
        for errors in self.read_errors()? {
            let class = &errors.class;
            match errors.error_patch_ids.len() {
                0 => {
                    notes.push(format!("{}: no error patches", class.name));
                    continue;
                }
                1 => {
                    notes.push(format!(
                        "{}: single error patch, no neighborhood to score",
                        class.name
                    ));
                    continue;
                }
                _ => {}
            }
            let index = EmbeddingMatrix::read(&self.path(EMBEDDINGS), &class.name)?;
            let prompt = ClassPrompt::new(class, &cfg.prompt_template);
            let ctx = ScoreContext::new(&index, &captions, &prompt, client, &Identity, params)?;
            let class_scores = client.install(|| score_all(&ctx, class))?;
            notes.push(format!(
                "{}: {} of {} error patches systematic",
                class.name,
                class_scores.iter().filter(|s| s.is_systematic()).count(),
                class_scores.len()
            ));
            scores.extend(class_scores);
        }
        scores.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
        artifact::write_jsonl(&self.path(SCORES), &scores)?;
        artifact::write_json(
            &self.path(SYSTEMATIC),
            &SystematicSet::from_scores(&scores, cfg.alpha, cfg.q),
        )?;
        Ok(StageOutput {
            files: vec![SCORES.into(), SYSTEMATIC.into()],
            notes,
        })
    }

    fn class_maps(&self) -> Result<MapTable> {
        let mut entries: Vec<ManifestEntry> = artifact::read_jsonl(&self.path(MANIFEST))?;
        if let Some(gt_path) = &self.gt_manifest {
            let gt: HashMap<String, Option<PathBuf>> = read_manifest(gt_path)?
                .into_iter()
                .map(|e| (e.image_id, e.gt_map_path))
                .collect();
            for e in &mut entries {
                e.gt_map_path = gt.get(&e.image_id).cloned().flatten();
            }
        }
        entries
            .par_iter()
            .map(|e| {
                let r = SegmentationRecord::load(e, self.cfg.num_classes, true)?;
                Ok((r.image_id, (r.pred_map, r.gt_map)))
            })
            .collect()
    }

    fn column(&self) -> ColumnKey {
        ColumnKey {
            detector_id: self.cfg.oracle.models.detector.clone(),
            ssm_id: self.cfg.ssm_id.clone(),
        }
    }

    fn row(&self, class: &str) -> RowKey {
        RowKey {
            dataset_id: self.cfg.dataset_id.clone(),
            class: class.to_string(),
        }
    }

    /// Computes `eval/metrics.json` from the run's artifacts.
    pub fn compute_metrics(&self) -> Result<MetricsReport> {
        let maps = self.class_maps()?;
        let mut counts = BTreeMap::new();
        let mut excluded = BTreeMap::new();
        let errors = self.read_errors()?;
        for es in &errors {
            let patches = PatchSet::read(self.run_dir(), &es.class)?;
            let ev = evaluate_detections(&patches, es, &maps)?;
            counts.insert((self.row(&es.class.name), self.column()), ev.counts);
            excluded.insert(es.class.name.clone(), ev.excluded_missing_gt);
        }

        let records = read_verdicts(&self.path(VERDICTS))?;
        let systematic = if records.is_empty() {
            None
        } else {
            let mut panel = self.cfg.panel.clone();
            if panel.is_empty() {
                panel = records.iter().map(|r| r.evaluator_id.clone()).collect();
                panel.sort();
                panel.dedup();
            }
            let quorum = self.cfg.quorum.unwrap_or(panel.len());
            let agg = aggregate_verdicts(&records, &panel, Some(quorum))?;
            let scores = self.read_scores()?;
            let mut classes = Vec::new();
            for es in &errors {
                let class_scores: Vec<SystematicityScore> = scores
                    .iter()
                    .filter(|s| es.contains(&s.patch_id))
                    .cloned()
                    .collect();
                let (status, result) = match systematic_accuracy(&class_scores, &agg) {
                    Ok(r) => ("ok".to_string(), Some(r)),
                    Err(Error::UncoveredPrediction { patch_id }) => {
                        (format!("uncovered prediction {patch_id}"), None)
                    }
                    Err(e) => return Err(e),
                };
                classes.push(SystematicClassResult {
                    row: self.row(&es.class.name),
                    column: self.column(),
                    status,
                    result,
                });
            }
            Some(SystematicReport {
                panel,
                quorum,
                incomplete_patch_ids: agg
                    .iter()
                    .filter(|(_, v)| v.verdict.is_none())
                    .map(|(k, _)| k.clone())
                    .collect(),
                classes,
            })
        };
        Ok(MetricsReport {
            precision_errors: MetricGrid::from_counts(counts),
            excluded_missing_gt: excluded,
            systematic,
        })
    }

    fn evaluate(&self) -> Result<(MetricsReport, StageOutput)> {
        let metrics = self.compute_metrics()?;
        artifact::write_json(&self.path(METRICS_JSON), &metrics)?;
        artifact::write_atomic(&self.path(METRICS_CSV), metrics.precision_errors.to_csv().as_bytes())?;
        let mut files = vec![METRICS_JSON.to_string(), METRICS_CSV.to_string()];
        if let Some(sys) = &metrics.systematic {
            artifact::write_atomic(&self.path(SYSTEMATIC_CSV), systematic_csv(sys).as_bytes())?;
            files.push(SYSTEMATIC_CSV.into());
        }
        let notes = metrics
            .excluded_missing_gt
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(c, v)| format!("{c}: {} patches lack ground truth", v.len()))
            .collect();
        Ok((metrics, StageOutput { files, notes }))
    }

    fn report(&self) -> Result<StageOutput> {
        let scores = self.read_scores()?;
        let errors = self.read_errors()?;
        let captions = self.read_captions()?;
        let report = build_report(&self.cfg, &scores, &errors, &captions);
        artifact::write_json(&self.path(REPORT_JSON), &report)?;
        let html = render_html(&report, self.run_dir())?;
        artifact::write_atomic(&self.path(REPORT_HTML), html.as_bytes())?;
        Ok(StageOutput {
            files: vec![REPORT_JSON.into(), REPORT_HTML.into()],
            notes: vec![report.summary.clone()],
        })
    }
}

/// Systematic-error accuracy table: one line per dataset x class, one
/// column per detector x model, in percent.
fn systematic_csv(sys: &SystematicReport) -> String {
    let mut columns: Vec<&ColumnKey> = sys.classes.iter().map(|c| &c.column).collect();
    columns.sort();
    columns.dedup();
    let mut rows: Vec<&RowKey> = sys.classes.iter().map(|c| &c.row).collect();
    rows.sort();
    rows.dedup();
    let mut out = String::from("dataset,class");
    for c in &columns {
        out.push_str(&format!(",{}/{}", c.detector_id, c.ssm_id));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{}", r.dataset_id, r.class));
        for c in &columns {
            out.push(',');
            let acc = sys
                .classes
                .iter()
                .find(|x| &x.row == r && &x.column == *c)
                .and_then(|x| x.result.as_ref())
                .and_then(|x| x.paper_style_accuracy);
            if let Some(a) = acc {
                out.push_str(&format!("{:.2}", a * 100.0));
            }
        }
        out.push('\n');
    }
    out
}
