//! Immutable run manifests and the code they ran, keyed by sequential run id.
//!
//! Layout: `runstore/counter` holds the last allocated id, manifests live at
//! `runstore/manifests/<id>.json`, code blobs under `objects/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{sha256_hex, to_canonical_json};
use crate::object_store::{ObjectKey, ObjectStore, StoreError};
use crate::pipeline::{code_snapshot_hash, hash_code_blobs, CodeSnapshot};

const COUNTER: &str = "runstore/counter";
const MANIFESTS: &str = "runstore/manifests/";

#[derive(Debug, Error)]
pub enum RunStoreError {
    #[error("run {0} not found")]
    NotFound(u64),
    #[error("run {0} already has a manifest")]
    ImmutableOverwrite(u64),
    #[error("code snapshot of run {run_id} is corrupt: expected {expected}, found {actual}")]
    CorruptCodeSnapshot { run_id: u64, expected: String, actual: String },
    #[error("manifest of run {run_id} is unreadable: {reason}")]
    CorruptManifest { run_id: u64, reason: String },
    #[error("input commit {0} of the run is missing from the store")]
    MissingInputCommit(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunStoreError {
    pub fn name(&self) -> &'static str {
        match self {
            RunStoreError::NotFound(_) => "RunNotFound",
            RunStoreError::ImmutableOverwrite(_) => "ImmutableOverwrite",
            RunStoreError::CorruptCodeSnapshot { .. } => "CorruptCodeSnapshot",
            RunStoreError::CorruptManifest { .. } => "CorruptManifest",
            RunStoreError::MissingInputCommit(_) => "MissingInputCommit",
            RunStoreError::Store(_) | RunStoreError::Io { .. } => "IoFailure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepStatus {
    Succeeded,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepResult {
    pub step: String,
    pub kind: String,
    pub status: StepStatus,
    pub deterministic: bool,
    pub output_snapshot: Option<String>,
    pub output_content_fingerprint: Option<String>,
    pub error: Option<String>,
    pub duration_ms: u64,
    pub stdout: Option<String>,
    pub stderr: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: u64,
    pub user: String,
    pub code_hash: String,
    pub code_blob_keys: BTreeMap<String, String>,
    pub input_commit: String,
    pub target_ref: String,
    pub output_commit: Option<String>,
    pub step_results: Vec<StepResult>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub environment_fingerprints: BTreeMap<String, String>,
    pub host_descriptor: String,
    pub all_or_nothing: bool,
    pub replay_of: Option<u64>,
    /// Free-form, not part of the code hash.
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn step(&self, name: &str) -> Option<&StepResult> {
        self.step_results.iter().find(|s| s.step == name)
    }
}

fn counter_key() -> ObjectKey {
    ObjectKey::new(COUNTER).expect("valid key")
}

fn manifest_key(run_id: u64) -> ObjectKey {
    ObjectKey::new(format!("{MANIFESTS}{run_id}.json")).expect("valid key")
}

/// Returns an id strictly greater than every id handed out before.
pub fn allocate_run_id(store: &ObjectStore) -> Result<u64, RunStoreError> {
    let key = counter_key();
    loop {
        let current = store.try_get_object(&key)?;
        let last: u64 = match &current {
            None => 0,
            Some(bytes) => std::str::from_utf8(bytes)
                .ok()
                .and_then(|s| s.trim_end_matches('\n').parse().ok())
                .ok_or_else(|| RunStoreError::CorruptManifest {
                    run_id: 0,
                    reason: format!("{COUNTER} does not hold a decimal integer"),
                })?,
        };
        let next = last + 1;
        if store.compare_and_set(&key, current.as_deref(), format!("{next}\n").as_bytes())? {
            return Ok(next);
        }
    }
}

/// Stores each code file as a content-addressed object; returns path → key.
pub fn store_code_blobs(store: &ObjectStore, code: &CodeSnapshot) -> Result<BTreeMap<String, String>, RunStoreError> {
    let mut keys = BTreeMap::new();
    for (path, bytes) in &code.blobs {
        let key = ObjectKey::for_hash(&sha256_hex(bytes));
        store.put_object(&key, bytes)?;
        keys.insert(path.clone(), key.as_str().to_string());
    }
    Ok(keys)
}

pub fn save_manifest(store: &ObjectStore, manifest: &RunManifest) -> Result<(), RunStoreError> {
    let bytes = to_canonical_json(manifest);
    if store.compare_and_set(&manifest_key(manifest.run_id), None, &bytes)? {
        Ok(())
    } else {
        Err(RunStoreError::ImmutableOverwrite(manifest.run_id))
    }
}

pub fn load_manifest(store: &ObjectStore, run_id: u64) -> Result<RunManifest, RunStoreError> {
    let bytes = match store.get_object(&manifest_key(run_id)) {
        Ok(b) => b,
        Err(StoreError::NotFound(_)) => return Err(RunStoreError::NotFound(run_id)),
        Err(e) => return Err(e.into()),
    };
    serde_json::from_slice(&bytes).map_err(|e| RunStoreError::CorruptManifest {
        run_id,
        reason: e.to_string(),
    })
}

/// Ids of all saved manifests, ascending.
pub fn list_runs(store: &ObjectStore) -> Result<Vec<u64>, RunStoreError> {
    let mut ids: Vec<u64> = store
        .list_prefix(MANIFESTS)?
        .iter()
        .filter_map(|k| k.as_str().strip_prefix(MANIFESTS)?.strip_suffix(".json")?.parse().ok())
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Everything needed to re-execute a past run.
#[derive(Debug, Clone)]
pub struct ReplaySource {
    pub manifest: RunManifest,
    pub code_dir: PathBuf,
    pub code: CodeSnapshot,
}

/// Materializes the code of `run_id` into `dest` (which must be empty or
/// absent) and checks it hashes back to the recorded code hash.
pub fn resolve_replay(store: &ObjectStore, run_id: u64, dest: &Path) -> Result<ReplaySource, RunStoreError> {
    let manifest = load_manifest(store, run_id)?;
    let corrupt = |actual: String| RunStoreError::CorruptCodeSnapshot {
        run_id,
        expected: manifest.code_hash.clone(),
        actual,
    };
    let mut blobs = BTreeMap::new();
    for (path, key) in &manifest.code_blob_keys {
        let safe = Path::new(path).components().all(|c| matches!(c, Component::Normal(_)));
        if !safe {
            return Err(corrupt(format!("unsafe path {path:?}")));
        }
        let key = ObjectKey::new(key.as_str())?;
        let bytes = match store.get_object(&key) {
            Ok(b) => b,
            Err(StoreError::NotFound(k)) => return Err(corrupt(format!("missing blob {k}"))),
            Err(e) => return Err(e.into()),
        };
        blobs.insert(path.clone(), bytes);
    }
    let stored_hash = hash_code_blobs(&blobs);
    if stored_hash != manifest.code_hash {
        return Err(corrupt(stored_hash));
    }
    for (path, bytes) in &blobs {
        let target = dest.join(path);
        let io = |source| RunStoreError::Io {
            path: target.clone(),
            source,
        };
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        fs::write(&target, bytes).map_err(io)?;
    }
    let on_disk = code_snapshot_hash(dest).map_err(|e| corrupt(e.to_string()))?;
    if on_disk.hash != manifest.code_hash {
        return Err(corrupt(on_disk.hash));
    }
    if !store.exists(&ObjectKey::for_hash(&manifest.input_commit)) {
        return Err(RunStoreError::MissingInputCommit(manifest.input_commit.clone()));
    }
    Ok(ReplaySource {
        manifest,
        code_dir: dest.to_path_buf(),
        code: on_disk,
    })
}

/// Per-step outcome of comparing a replay against the original run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepVerdict {
    pub step: String,
    /// `MATCH` or `MISMATCH`.
    pub verdict: &'static str,
    pub original: Option<String>,
    pub replayed: Option<String>,
    /// Set when the declared environment differs between the two runs.
    pub warning: Option<String>,
}

pub fn compare_runs(original: &RunManifest, replay: &RunManifest) -> Vec<StepVerdict> {
    original
        .step_results
        .iter()
        .map(|o| {
            let r = replay.step(&o.step);
            let replayed = r.and_then(|r| r.output_content_fingerprint.clone());
            let matched = o.output_content_fingerprint.is_some() && o.output_content_fingerprint == replayed;
            let env_o = original.environment_fingerprints.get(&o.step);
            let env_r = replay.environment_fingerprints.get(&o.step);
            let warning = (env_o != env_r).then(|| {
                format!(
                    "environment fingerprint changed: {} -> {}",
                    env_o.map_or("none", |s| s.as_str()),
                    env_r.map_or("none", |s| s.as_str())
                )
            });
            StepVerdict {
                step: o.step.clone(),
                verdict: if matched { "MATCH" } else { "MISMATCH" },
                original: o.output_content_fingerprint.clone(),
                replayed,
                warning,
            }
        })
        .collect()
}

/// `os/arch/cpus` of the current machine.
pub fn host_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{}/{}/{}cpu", std::env::consts::OS, std::env::consts::ARCH, cpus)
}
