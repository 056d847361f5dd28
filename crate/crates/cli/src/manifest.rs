use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    /// Hash of everything the step's outputs depend on.
    pub input_hash: String,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub artifacts: Vec<PathBuf>,
    #[serde(default)]
    pub train_steps: usize,
    #[serde(default)]
    pub started: Option<u64>,
    #[serde(default)]
    pub finished: Option<u64>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub train_steps: usize,
}

/// Per-run bookkeeping stored as `run_manifest.json` in the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Hash of the resolved config plus the contents of every input file.
    pub config_hash: String,
    pub created: u64,
    pub updated: u64,
    /// Keyed by step name: curate, mix, each stage, eval.
    pub stages: BTreeMap<String, StageRecord>,
    #[serde(default)]
    pub last_invocation: Invocation,
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub const FILE: &'static str = "run_manifest.json";

    pub fn new(run_id: &str, config_hash: &str) -> Self {
        let t = now();
        Self {
            run_id: run_id.into(),
            config_hash: config_hash.into(),
            created: t,
            updated: t,
            stages: BTreeMap::new(),
            last_invocation: Invocation::default(),
        }
    }

    /// An existing manifest for the run dir, or a fresh one.
    pub fn open(run_dir: &Path, run_id: &str, config_hash: &str) -> Result<Self, CliError> {
        let path = run_dir.join(Self::FILE);
        if !path.exists() {
            return Ok(Self::new(run_id, config_hash));
        }
        let text = fs::read_to_string(&path)?;
        let mut m: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        m.config_hash = config_hash.into();
        m.last_invocation = Invocation::default();
        Ok(m)
    }

    pub fn save(&mut self, run_dir: &Path) -> Result<(), CliError> {
        self.updated = now();
        fs::create_dir_all(run_dir)?;
        let tmp = run_dir.join(format!("{}.tmp", Self::FILE));
        fs::write(&tmp, serde_json::to_string_pretty(self).expect("serializable manifest"))?;
        fs::rename(&tmp, run_dir.join(Self::FILE))?;
        Ok(())
    }

    /// True when `step` finished with the same inputs and its outputs are
    /// still on disk.
    pub fn reusable(&self, step: &str, input_hash: &str) -> bool {
        self.stages.get(step).is_some_and(|r| {
            r.status == StageStatus::Done
                && r.input_hash == input_hash
                && r.checkpoint.as_ref().is_none_or(|c| c.join("index.json").is_file())
                && r.artifacts.iter().all(|a| a.exists())
        })
    }

    pub fn mark_running(&mut self, step: &str, input_hash: &str) {
        self.stages.insert(
            step.into(),
            StageRecord {
                status: StageStatus::Running,
                input_hash: input_hash.into(),
                checkpoint: None,
                artifacts: Vec::new(),
                train_steps: 0,
                started: Some(now()),
                finished: None,
                error: None,
            },
        );
    }

    pub fn mark_failed(&mut self, step: &str, err: &str) {
        if let Some(r) = self.stages.get_mut(step) {
            r.status = StageStatus::Failed;
            r.finished = Some(now());
            r.error = Some(err.into());
        }
    }

    pub fn mark_done(&mut self, step: &str, checkpoint: Option<PathBuf>, artifacts: Vec<PathBuf>, train_steps: usize) {
        if let Some(r) = self.stages.get_mut(step) {
            r.status = StageStatus::Done;
            r.finished = Some(now());
            r.checkpoint = checkpoint;
            r.artifacts = artifacts;
            r.train_steps = train_steps;
        }
        self.last_invocation.executed.push(step.into());
        self.last_invocation.train_steps += train_steps;
    }

    pub fn mark_skipped(&mut self, step: &str) {
        self.last_invocation.skipped.push(step.into());
    }

    /// Steps downstream of a re-run are pending until reached.
    pub fn status(&self, step: &str) -> StageStatus {
        self.stages.get(step).map_or(StageStatus::Pending, |r| r.status)
    }
}

/// Incremental SHA-256 over labelled parts.
#[derive(Clone, Default)]
pub struct Hasher(Sha256);

impl Hasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn part(&mut self, label: &str, bytes: &[u8]) -> &mut Self {
        self.0.update((label.len() as u64).to_le_bytes());
        self.0.update(label.as_bytes());
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    pub fn json<T: Serialize>(&mut self, label: &str, value: &T) -> &mut Self {
        let bytes = serde_json::to_vec(value).expect("serializable value");
        self.part(label, &bytes)
    }

    pub fn file(&mut self, path: &Path) -> Result<&mut Self, CliError> {
        let bytes = fs::read(path)?;
        Ok(self.part(&path.to_string_lossy(), &bytes))
    }

    pub fn finish(&self) -> String {
        let digest = self.0.clone().finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
