use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::oracle::{OracleConfig, OracleMode};
use crate::patch::{Connectivity, SemanticClass};
use crate::systematicity::{Sigma1Query, DEFAULT_ALPHA, DEFAULT_PROMPT_TEMPLATE, DEFAULT_Q};

fn default_min_patch_size() -> u32 {
    60
}
fn default_q() -> usize {
    DEFAULT_Q
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_string()
}
fn default_dataset() -> String {
    "dataset".into()
}
fn default_ssm() -> String {
    "ssm".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest_path: PathBuf,
    pub run_dir: PathBuf,
    /// Length of the class table; map values at or above it are invalid.
    pub num_classes: u16,
    /// Classes to audit.
    pub classes: Vec<SemanticClass>,
    #[serde(default = "default_min_patch_size")]
    pub min_patch_size: u32,
    #[serde(default)]
    pub connectivity: Connectivity,
    pub oracle: OracleConfig,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_template")]
    pub prompt_template: String,
    #[serde(default)]
    pub sigma1_query: Sigma1Query,
    /// Row label in metric tables.
    #[serde(default = "default_dataset")]
    pub dataset_id: String,
    /// Column label in metric tables, naming the segmentation model.
    #[serde(default = "default_ssm")]
    pub ssm_id: String,
    /// Evaluators whose verdicts count. Empty means every evaluator with a
    /// file under `verdicts/`.
    #[serde(default)]
    pub panel: Vec<String>,
    /// Verdicts needed before a patch is decided; defaults to the panel size.
    #[serde(default)]
    pub quorum: Option<usize>,
    /// Manifest whose `gt_map_path` entries replace those of `manifest_path`.
    #[serde(default)]
    pub gt_manifest_path: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    /// Parses a config file and resolves relative paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = artifact::read_json(path).map_err(|e| match e {
            Error::Json { path, source } => Error::Config(format!("{}: {source}", path.display())),
            other => other,
        })?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let base = if base.as_os_str().is_empty() {
            std::env::current_dir().map_err(|e| Error::io(".", e))?
        } else {
            base
        };
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.manifest_path = abs(&self.manifest_path);
        self.run_dir = abs(&self.run_dir);
        self.gt_manifest_path = self.gt_manifest_path.as_deref().map(abs);
        if let Some(d) = &self.oracle.fixture_dir {
            self.oracle.fixture_dir = Some(abs(d));
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        let mut names = HashSet::new();
        let mut indices = HashSet::new();
        for c in &self.classes {
            c.validate(self.num_classes)?;
            if !names.insert(&c.name) || !indices.insert(c.index) {
                return bad(format!("class {} listed twice", c.name));
            }
        }
        if self.min_patch_size == 0 {
            return bad("min_patch_size must be positive".into());
        }
        if self.q == 0 {
            return bad("q must be positive".into());
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite".into());
        }
        if !self.prompt_template.contains("{class}") {
            return bad("prompt_template must contain {class}".into());
        }
        let panel: HashSet<_> = self.panel.iter().collect();
        if panel.len() != self.panel.len() {
            return bad("panel lists an evaluator twice".into());
        }
        if let Some(q) = self.quorum {
            if q == 0 || (!self.panel.is_empty() && q > self.panel.len()) {
                return bad(format!("quorum {q} does not fit the panel"));
            }
        }
        if self.oracle.mode == OracleMode::Fixture && self.oracle.fixture_dir.is_none() {
            return bad("fixture mode requires oracle.fixture_dir".into());
        }
        self.oracle.validate().map_err(Error::Config)
    }

    pub fn path(&self) -> PathBuf {
        self.run_dir.join("config.json")
    }
}
