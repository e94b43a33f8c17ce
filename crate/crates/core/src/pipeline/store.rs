//! Run persistence. Each run lives in `<root>/<id>/` and is described by its
//! `manifest.json`; artifacts are listed there with their SHA-256.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::config::{Overrides, RunConfig};
use super::io::{sha256_hex, write_atomic};
use crate::language::{ParsedPrompts, SceneDescription};
use crate::mask::MaskSource;
use crate::metrics::MetricReport;
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Parsing,
    Masking,
    Editing,
    /// Terminal state of mask-only runs.
    Masked,
    Done,
    Failed,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Masked | Self::Done | Self::Failed)
    }

    fn rank(self) -> u8 {
        match self {
            Self::Parsing => 0,
            Self::Masking => 1,
            Self::Editing => 2,
            Self::Masked | Self::Done | Self::Failed => 3,
        }
    }

    /// Forward-only: a terminal state never changes, `masked` is only
    /// reachable from masking, and any live state may fail.
    pub fn can_become(self, next: RunStatus) -> bool {
        if self.is_terminal() {
            return self == next;
        }
        match next {
            Self::Failed => true,
            Self::Masked => self == Self::Masking,
            _ => next.rank() >= self.rank(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Parsing => "parsing",
            Self::Masking => "masking",
            Self::Editing => "editing",
            Self::Masked => "masked",
            Self::Done => "done",
            Self::Failed => "failed",
        }
    }
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    Chat,
    Fallback,
    /// Copied from the parent run.
    Parent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunError {
    pub stage: String,
    pub message: String,
    /// Safe to show verbatim to an end user.
    pub user_facing: bool,
}

/// How a rerun reuses its parent's work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReusePlan {
    /// Nothing reused.
    Full,
    /// Prompts reused; mask recomputed.
    Prompts,
    /// Prompts and soft mask reused; binarized again.
    SoftMask,
    /// Prompts, soft and binary mask reused; editing only.
    BinaryMask,
}

/// Persisted record of one pipeline execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRun {
    pub id: String,
    #[serde(default)]
    pub parent_id: Option<String>,
    pub created_at: String,
    pub status: RunStatus,
    /// Stop after masking.
    #[serde(default)]
    pub mask_only: bool,
    pub instruction: String,
    pub config: RunConfig,
    #[serde(default)]
    pub overrides: Option<Overrides>,
    pub reuse: ReusePlan,
    #[serde(default)]
    pub prompts: Option<ParsedPrompts>,
    #[serde(default)]
    pub prompt_source: Option<PromptSource>,
    #[serde(default)]
    pub description: Option<SceneDescription>,
    #[serde(default)]
    pub mask_source: Option<MaskSource>,
    #[serde(default)]
    pub backends: BTreeMap<String, String>,
    #[serde(default)]
    pub artifacts: BTreeMap<String, ArtifactRecord>,
    /// Seconds per stage.
    #[serde(default)]
    pub timings: BTreeMap<String, f64>,
    #[serde(default)]
    pub metrics: Option<MetricReport>,
    #[serde(default)]
    pub error: Option<RunError>,
}

impl EditRun {
    pub fn has_artifact(&self, name: &str) -> bool {
        self.artifacts.contains_key(name)
    }
}

pub trait RunStore: Send + Sync {
    /// Creates the run directory and its first manifest.
    fn create(&self, run: &EditRun) -> Result<()>;
    fn read(&self, id: &str) -> Result<EditRun>;
    fn list(&self) -> Result<Vec<String>>;
    /// Replaces the manifest; rejects backwards status moves.
    fn update(&self, run: &EditRun) -> Result<()>;
    /// Writes an artifact file inside the run directory.
    fn put_artifact(&self, id: &str, name: &str, bytes: &[u8]) -> Result<ArtifactRecord>;
    fn read_artifact(&self, id: &str, name: &str) -> Result<Vec<u8>>;
    fn artifact_path(&self, id: &str, name: &str) -> Result<PathBuf>;
}

/// Directory-backed store. Manifest writes of one run are serialized.
pub struct FsRunStore {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(Error::UnknownRun(id.to_string()));
    }
    Ok(())
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && name
            .split('/')
            .all(|part| !part.is_empty() && part != ".." && part.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)));
    if !ok {
        return Err(Error::InvalidConfig(format!("bad artifact name `{name}`")));
    }
    Ok(())
}

impl FsRunStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    fn lock(&self, id: &str) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entry(id.to_string())
            .or_default()
            .clone()
    }

    fn write_manifest(&self, run: &EditRun) -> Result<()> {
        write_atomic(
            &self.run_dir(&run.id).join(MANIFEST),
            serde_json::to_string_pretty(run)?.as_bytes(),
        )
    }
}

impl RunStore for FsRunStore {
    fn create(&self, run: &EditRun) -> Result<()> {
        check_id(&run.id)?;
        let lock = self.lock(&run.id);
        let _g = lock.lock().unwrap_or_else(|e| e.into_inner());
        let dir = self.run_dir(&run.id);
        if dir.join(MANIFEST).exists() {
            return Err(Error::InvalidConfig(format!("run {} already exists", run.id)));
        }
        fs::create_dir_all(&dir)?;
        self.write_manifest(run)
    }

    fn read(&self, id: &str) -> Result<EditRun> {
        check_id(id)?;
        let path = self.run_dir(id).join(MANIFEST);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::UnknownRun(id.to_string())),
            Err(e) => return Err(e.into()),
        };
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn list(&self) -> Result<Vec<String>> {
        let mut ids: Vec<String> = fs::read_dir(&self.root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(MANIFEST).exists())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    fn update(&self, run: &EditRun) -> Result<()> {
        check_id(&run.id)?;
        let lock = self.lock(&run.id);
        let _g = lock.lock().unwrap_or_else(|e| e.into_inner());
        let current = self.read(&run.id)?;
        if !current.status.can_become(run.status) {
            return Err(Error::InvalidConfig(format!(
                "run {}: status cannot move from {} to {}",
                run.id, current.status, run.status
            )));
        }
        if current.status.is_terminal() && current != *run {
            return Err(Error::InvalidConfig(format!("run {} is terminal", run.id)));
        }
        self.write_manifest(run)
    }

    fn put_artifact(&self, id: &str, name: &str, bytes: &[u8]) -> Result<ArtifactRecord> {
        check_id(id)?;
        check_name(name)?;
        write_atomic(&self.run_dir(id).join(name), bytes)?;
        Ok(ArtifactRecord {
            file: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        })
    }

    fn read_artifact(&self, id: &str, name: &str) -> Result<Vec<u8>> {
        Ok(fs::read(self.artifact_path(id, name)?)?)
    }

    fn artifact_path(&self, id: &str, name: &str) -> Result<PathBuf> {
        check_id(id)?;
        check_name(name)?;
        Ok(self.run_dir(id).join(name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(id: &str) -> EditRun {
        EditRun {
            id: id.into(),
            parent_id: None,
            created_at: "2026-01-01T00:00:00Z".into(),
            status: RunStatus::Parsing,
            mask_only: false,
            instruction: "Change the dog to a cat".into(),
            config: RunConfig::default(),
            overrides: None,
            reuse: ReusePlan::Full,
            prompts: None,
            prompt_source: None,
            description: None,
            mask_source: None,
            backends: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
            metrics: None,
            error: None,
        }
    }

    #[test]
    fn status_is_forward_only() {
        use RunStatus::*;
        assert!(Parsing.can_become(Masking));
        assert!(Masking.can_become(Editing));
        assert!(Editing.can_become(Done));
        assert!(Masking.can_become(Masked));
        assert!(Parsing.can_become(Failed));
        assert!(!Editing.can_become(Masking));
        assert!(!Editing.can_become(Masked));
        assert!(!Done.can_become(Failed));
        assert!(!Failed.can_become(Done));
    }

    #[test]
    fn create_read_update_list() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsRunStore::new(dir.path()).unwrap();
        let mut r = run("r1");
        store.create(&r).unwrap();
        assert!(store.create(&r).is_err());
        r.status = RunStatus::Masking;
        store.update(&r).unwrap();
        assert_eq!(store.read("r1").unwrap(), r);
        r.status = RunStatus::Parsing;
        assert!(store.update(&r).is_err());
        r.status = RunStatus::Failed;
        store.update(&r).unwrap();
        store.update(&r).unwrap();
        r.instruction = "changed".into();
        assert!(store.update(&r).is_err());
        store.create(&run("r0")).unwrap();
        assert_eq!(store.list().unwrap(), vec!["r0", "r1"]);
        assert!(matches!(store.read("nope"), Err(Error::UnknownRun(_))));
    }

    #[test]
    fn artifacts_are_hashed_and_confined() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsRunStore::new(dir.path()).unwrap();
        store.create(&run("a")).unwrap();
        let rec = store.put_artifact("a", "debug/x.npy", b"abc").unwrap();
        assert_eq!(rec.sha256, sha256_hex(b"abc"));
        assert_eq!(store.read_artifact("a", "debug/x.npy").unwrap(), b"abc");
        assert!(store.put_artifact("a", "../escape", b"x").is_err());
        assert!(store.read_artifact("../a", "manifest.json").is_err());
    }
}
