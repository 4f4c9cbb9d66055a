use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::artifact::{self, sha256_file};
use crate::error::{Error, Result};
use crate::oracle::OracleStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extract,
    Detect,
    Embed,
    Caption,
    Score,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Extract,
        Stage::Detect,
        Stage::Embed,
        Stage::Caption,
        Stage::Score,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Extract => "extract",
            Stage::Detect => "detect",
            Stage::Embed => "embed",
            Stage::Caption => "caption",
            Stage::Score => "score",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Extract => &[],
            Stage::Detect => &[Stage::Extract],
            Stage::Embed | Stage::Caption => &[Stage::Detect],
            Stage::Score => &[Stage::Embed, Stage::Caption],
            Stage::Evaluate => &[Stage::Detect, Stage::Score],
            Stage::Report => &[Stage::Score],
        }
    }

    /// Every stage upstream of `self`, in pipeline order.
    pub fn ancestors(self) -> Vec<Stage> {
        let mut out: Vec<Stage> = Vec::new();
        let mut todo = self.deps().to_vec();
        while let Some(s) = todo.pop() {
            if !out.contains(&s) {
                out.push(s);
                todo.extend_from_slice(s.deps());
            }
        }
        out.sort();
        out
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    #[default]
    Pending,
    Done,
    Failed,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    /// Run-dir-relative path to SHA-256 of its content.
    pub outputs: BTreeMap<String, String>,
    pub input_fingerprint: String,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleStats>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunState {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join("state.json")
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let p = Self::path(run_dir);
        if p.exists() {
            artifact::read_json(&p)
        } else {
            Ok(RunState::default())
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        artifact::write_json(&Self::path(run_dir), self)
    }

    pub fn status(&self, stage: Stage) -> StageStatus {
        self.stages.get(&stage).map(|r| r.status).unwrap_or_default()
    }

    /// Done, and every recorded output still exists with its recorded hash.
    pub fn is_done(&self, run_dir: &Path, stage: Stage) -> bool {
        match self.stages.get(&stage) {
            Some(r) if r.status == StageStatus::Done => r
                .outputs
                .iter()
                .all(|(rel, hash)| sha256_file(&run_dir.join(rel)).is_ok_and(|h| &h == hash)),
            _ => false,
        }
    }
}

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

fn pid_alive(pid: u32) -> bool {
    let proc_root = Path::new("/proc");
    !proc_root.is_dir() || proc_root.join(pid.to_string()).exists()
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join("run.lock");
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(RunLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path)
                        .ok()
                        .and_then(|s| s.trim().parse::<u32>().ok());
                    match holder {
                        // A crashed process left its lock behind.
                        Some(pid) if !pid_alive(pid) => {
                            log::warn!("removing stale lock held by pid {pid}");
                            let _ = fs::remove_file(&path);
                        }
                        _ => return Err(Error::RunLocked(run_dir.to_path_buf())),
                    }
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Err(Error::RunLocked(run_dir.to_path_buf()))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
