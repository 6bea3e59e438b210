//! Git-for-data catalog.
//!
//! A commit maps table names to snapshot ids and is stored content-addressed
//! under `objects/`. Branches are mutable refs at `refs/<name>` holding a
//! commit hash plus LF, advanced only through compare-and-set so multi-table
//! commits land atomically.
//!
//! Naming follows a `user.branch` convention: a user may write only to
//! branches prefixed with their own name, anybody may read anything, and
//! `main` changes only through [`Catalog::merge`].

mod merge;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{is_sha256_hex, sha256_hex, to_canonical_json, utc_now};
use crate::object_store::{ObjectKey, ObjectStore, StoreError};
use crate::table::{is_valid_identifier, load_snapshot, TableError, TableSnapshot};

pub use merge::{three_way_tables, MergeOutcome};

pub const MAIN: &str = "main";

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog is already initialized")]
    AlreadyInitialized,
    #[error("branch {0} already exists")]
    BranchExists(String),
    #[error("invalid name {0:?}: {1}")]
    InvalidName(String, &'static str),
    #[error("ref or commit {0} not found")]
    RefNotFound(String),
    #[error("table {table} not found at {at}")]
    TableNotFound { table: String, at: String },
    #[error("snapshot {0} not found")]
    SnapshotNotFound(String),
    #[error("invalid update: {0}")]
    InvalidUpdate(String),
    #[error("concurrent update on {branch}: expected head {expected}, found {actual}")]
    ConcurrentUpdate {
        branch: String,
        expected: String,
        actual: String,
    },
    #[error("user {user:?} may not write to {branch}")]
    WritePermissionDenied { user: String, branch: String },
    #[error("commits have multiple merge bases: {0:?}")]
    AmbiguousMergeBase(Vec<String>),
    #[error("commits {0} and {1} share no ancestor")]
    NoCommonAncestor(String, String),
    #[error("merge conflict on tables {0:?}")]
    MergeConflict(Vec<String>),
    #[error("corrupt catalog object {key}: {reason}")]
    Corrupt { key: String, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Table(#[from] TableError),
}

impl CatalogError {
    pub fn name(&self) -> &'static str {
        match self {
            CatalogError::AlreadyInitialized => "AlreadyInitialized",
            CatalogError::BranchExists(_) => "BranchExists",
            CatalogError::InvalidName(..) => "InvalidName",
            CatalogError::RefNotFound(_) => "RefNotFound",
            CatalogError::TableNotFound { .. } => "TableNotFound",
            CatalogError::SnapshotNotFound(_) => "SnapshotNotFound",
            CatalogError::InvalidUpdate(_) => "InvalidUpdate",
            CatalogError::ConcurrentUpdate { .. } => "ConcurrentUpdate",
            CatalogError::WritePermissionDenied { .. } => "WritePermissionDenied",
            CatalogError::AmbiguousMergeBase(_) => "AmbiguousMergeBase",
            CatalogError::NoCommonAncestor(..) => "NoCommonAncestor",
            CatalogError::MergeConflict(_) => "MergeConflict",
            CatalogError::Corrupt { .. } => "Corrupt",
            CatalogError::Store(e) => e.name(),
            CatalogError::Table(e) => e.name(),
        }
    }
}

/// Content-addressed catalog state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Commit {
    pub author: String,
    pub created_at: String,
    pub message: String,
    pub parents: Vec<String>,
    pub tables: BTreeMap<String, String>,
}

impl Commit {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        to_canonical_json(self)
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.canonical_bytes())
    }

    pub fn first_parent(&self) -> Option<&str> {
        self.parents.first().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Ref {
    pub name: String,
    pub head: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeKind {
    Added,
    Removed,
    Modified,
}

impl fmt::Display for ChangeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChangeKind::Added => "added",
            ChangeKind::Removed => "removed",
            ChangeKind::Modified => "modified",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDiff {
    pub table_name: String,
    pub change: ChangeKind,
    pub from_snapshot: Option<String>,
    pub to_snapshot: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TableUpdate {
    Set(String),
    Remove,
}

/// `main`, or `user.branch` with both parts in `[a-z0-9_]+`.
pub fn is_valid_ref_name(name: &str) -> bool {
    if name == MAIN {
        return true;
    }
    let part_ok = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_');
    matches!(name.split_once('.'), Some((u, b)) if part_ok(u) && part_ok(b))
}

/// Owner of a `user.branch` ref; `None` for `main`.
pub fn branch_owner(name: &str) -> Option<&str> {
    name.split_once('.').map(|(u, _)| u)
}

fn ref_key(name: &str) -> Result<ObjectKey, CatalogError> {
    if !is_valid_ref_name(name) {
        return Err(CatalogError::InvalidName(name.to_string(), "refs are `main` or `user.branch`"));
    }
    Ok(ObjectKey::new(format!("refs/{name}"))?)
}

fn ref_bytes(hash: &str) -> Vec<u8> {
    format!("{hash}\n").into_bytes()
}

type Clock = Arc<dyn Fn() -> String + Send + Sync>;

/// Catalog handle bound to a store and the configured user.
#[derive(Clone)]
pub struct Catalog {
    store: ObjectStore,
    user: String,
    clock: Clock,
}

impl fmt::Debug for Catalog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Catalog").field("root", &self.store.root()).field("user", &self.user).finish()
    }
}

impl Catalog {
    pub fn new(store: ObjectStore, user: impl Into<String>) -> Self {
        Self {
            store,
            user: user.into(),
            clock: Arc::new(utc_now),
        }
    }

    /// Replaces the timestamp source used for new commits.
    pub fn with_clock(mut self, clock: impl Fn() -> String + Send + Sync + 'static) -> Self {
        self.clock = Arc::new(clock);
        self
    }

    /// Current time from the catalog's clock.
    pub fn now(&self) -> String {
        (self.clock)()
    }

    pub fn store(&self) -> &ObjectStore {
        &self.store
    }

    pub fn user(&self) -> &str {
        &self.user
    }

    /// Same store and clock, different acting user.
    pub fn as_user(&self, user: impl Into<String>) -> Self {
        Self {
            store: self.store.clone(),
            user: user.into(),
            clock: self.clock.clone(),
        }
    }

    /// Whether the configured user may commit directly to `branch`.
    pub fn can_commit_to(&self, branch: &str) -> bool {
        branch_owner(branch) == Some(self.user.as_str())
    }

    pub fn check_commit_permission(&self, branch: &str) -> Result<(), CatalogError> {
        if self.can_commit_to(branch) {
            Ok(())
        } else {
            Err(CatalogError::WritePermissionDenied {
                user: self.user.clone(),
                branch: branch.to_string(),
            })
        }
    }

    fn check_merge_permission(&self, target: &str) -> Result<(), CatalogError> {
        if target == MAIN {
            Ok(())
        } else {
            self.check_commit_permission(target)
        }
    }

    fn store_commit(&self, commit: &Commit) -> Result<String, CatalogError> {
        let bytes = commit.canonical_bytes();
        let hash = sha256_hex(&bytes);
        self.store.put_object(&ObjectKey::for_hash(&hash), &bytes)?;
        Ok(hash)
    }

    pub fn load_commit(&self, hash: &str) -> Result<Commit, CatalogError> {
        if !is_sha256_hex(hash) {
            return Err(CatalogError::RefNotFound(hash.to_string()));
        }
        let key = ObjectKey::for_hash(hash);
        let bytes = match self.store.get_object(&key) {
            Ok(b) => b,
            Err(StoreError::NotFound(_)) => return Err(CatalogError::RefNotFound(hash.to_string())),
            Err(e) => return Err(e.into()),
        };
        if sha256_hex(&bytes) != hash {
            return Err(CatalogError::Corrupt {
                key: key.to_string(),
                reason: "hash mismatch".into(),
            });
        }
        // Other object kinds live under objects/ too; they simply aren't commits.
        serde_json::from_slice(&bytes).map_err(|_| CatalogError::RefNotFound(hash.to_string()))
    }

    /// Creates the root commit and points `main` at it.
    pub fn init(&self) -> Result<Ref, CatalogError> {
        let root = Commit {
            author: self.user.clone(),
            created_at: (self.clock)(),
            message: "init".into(),
            parents: vec![],
            tables: BTreeMap::new(),
        };
        let key = ref_key(MAIN)?;
        if self.store.exists(&key) {
            return Err(CatalogError::AlreadyInitialized);
        }
        let hash = self.store_commit(&root)?;
        if !self.store.compare_and_set(&key, None, &ref_bytes(&hash))? {
            return Err(CatalogError::AlreadyInitialized);
        }
        Ok(Ref {
            name: MAIN.into(),
            head: hash,
        })
    }

    pub fn is_initialized(&self) -> bool {
        ref_key(MAIN).map(|k| self.store.exists(&k)).unwrap_or(false)
    }

    fn read_ref(&self, name: &str) -> Result<Option<String>, CatalogError> {
        let key = ref_key(name)?;
        match self.store.try_get_object(&key)? {
            None => Ok(None),
            Some(bytes) => {
                let text = String::from_utf8(bytes).map_err(|e| CatalogError::Corrupt {
                    key: key.to_string(),
                    reason: e.to_string(),
                })?;
                let hash = text.strip_suffix('\n').unwrap_or(&text);
                if !is_sha256_hex(hash) {
                    return Err(CatalogError::Corrupt {
                        key: key.to_string(),
                        reason: "ref does not hold a commit hash".into(),
                    });
                }
                Ok(Some(hash.to_string()))
            }
        }
    }

    /// Head commit hash of branch `name`.
    pub fn head(&self, name: &str) -> Result<String, CatalogError> {
        if !is_valid_ref_name(name) {
            return Err(CatalogError::RefNotFound(name.to_string()));
        }
        self.read_ref(name)?.ok_or_else(|| CatalogError::RefNotFound(name.to_string()))
    }

    pub fn branch_exists(&self, name: &str) -> Result<bool, CatalogError> {
        if !is_valid_ref_name(name) {
            return Ok(false);
        }
        Ok(self.read_ref(name)?.is_some())
    }

    /// Resolves a branch name or full commit hash to a commit hash.
    pub fn resolve(&self, rev: &str) -> Result<String, CatalogError> {
        if is_valid_ref_name(rev) {
            if let Some(h) = self.read_ref(rev)? {
                return Ok(h);
            }
        }
        if is_sha256_hex(rev) {
            self.load_commit(rev)?;
            return Ok(rev.to_string());
        }
        Err(CatalogError::RefNotFound(rev.to_string()))
    }

    pub fn list_branches(&self) -> Result<Vec<Ref>, CatalogError> {
        let mut out = Vec::new();
        for key in self.store.list_prefix("refs/")? {
            let name = &key.as_str()["refs/".len()..];
            if let Some(head) = self.read_ref(name)? {
                out.push(Ref {
                    name: name.to_string(),
                    head,
                });
            }
        }
        Ok(out)
    }

    /// Creates `name` pointing at the head of `from` (a branch or commit).
    /// Writes exactly one object: the ref file.
    pub fn create_branch(&self, name: &str, from: &str) -> Result<Ref, CatalogError> {
        if name == MAIN || !is_valid_ref_name(name) {
            return Err(CatalogError::InvalidName(name.to_string(), "branch names follow `user.branch`"));
        }
        self.check_commit_permission(name)?;
        let head = self.resolve(from)?;
        let key = ref_key(name)?;
        if !self.store.compare_and_set(&key, None, &ref_bytes(&head))? {
            return Err(CatalogError::BranchExists(name.to_string()));
        }
        Ok(Ref {
            name: name.to_string(),
            head,
        })
    }

    /// Applies all `updates` to `branch` as a single commit.
    ///
    /// The new commit's parent is `expected_head`; the ref moves only if it
    /// still points there, otherwise nothing lands and
    /// [`CatalogError::ConcurrentUpdate`] is returned.
    pub fn commit_tables(
        &self,
        branch: &str,
        updates: &BTreeMap<String, TableUpdate>,
        message: &str,
        expected_head: &str,
    ) -> Result<(String, Commit), CatalogError> {
        if !is_valid_ref_name(branch) {
            return Err(CatalogError::RefNotFound(branch.to_string()));
        }
        self.check_commit_permission(branch)?;
        if updates.is_empty() {
            return Err(CatalogError::InvalidUpdate("no table updates; empty commits are not allowed".into()));
        }
        let current = self.head(branch)?;
        let parent = self.load_commit(expected_head)?;
        let mut tables = parent.tables.clone();
        for (name, update) in updates {
            if !is_valid_identifier(name) {
                return Err(CatalogError::InvalidName(name.clone(), "table names match [a-z_][a-z0-9_]*"));
            }
            match update {
                TableUpdate::Set(snapshot_id) => {
                    match load_snapshot(&self.store, snapshot_id) {
                        Ok(_) => {}
                        Err(TableError::NotFound(_)) => return Err(CatalogError::SnapshotNotFound(snapshot_id.clone())),
                        Err(e) => return Err(e.into()),
                    }
                    tables.insert(name.clone(), snapshot_id.clone());
                }
                TableUpdate::Remove => {
                    if tables.remove(name).is_none() {
                        return Err(CatalogError::InvalidUpdate(format!("cannot remove missing table {name}")));
                    }
                }
            }
        }
        if current != expected_head {
            return Err(CatalogError::ConcurrentUpdate {
                branch: branch.to_string(),
                expected: expected_head.to_string(),
                actual: current,
            });
        }
        let commit = Commit {
            author: self.user.clone(),
            created_at: (self.clock)(),
            message: message.to_string(),
            parents: vec![expected_head.to_string()],
            tables,
        };
        let hash = self.store_commit(&commit)?;
        self.advance(branch, expected_head, &hash)?;
        Ok((hash, commit))
    }

    fn advance(&self, branch: &str, expected: &str, new: &str) -> Result<(), CatalogError> {
        let key = ref_key(branch)?;
        if self.store.compare_and_set(&key, Some(&ref_bytes(expected)), &ref_bytes(new))? {
            Ok(())
        } else {
            Err(CatalogError::ConcurrentUpdate {
                branch: branch.to_string(),
                expected: expected.to_string(),
                actual: self.head(branch).unwrap_or_default(),
            })
        }
    }

    /// Table map at a branch or commit.
    pub fn tables_at(&self, rev: &str) -> Result<BTreeMap<String, String>, CatalogError> {
        let hash = self.resolve(rev)?;
        Ok(self.load_commit(&hash)?.tables)
    }

    pub fn resolve_table(&self, rev: &str, table: &str) -> Result<TableSnapshot, CatalogError> {
        let tables = self.tables_at(rev)?;
        let id = tables.get(table).ok_or_else(|| CatalogError::TableNotFound {
            table: table.to_string(),
            at: rev.to_string(),
        })?;
        Ok(load_snapshot(&self.store, id)?)
    }

    /// Commits from the head of `rev` back to the root, following first parents.
    pub fn log(&self, rev: &str) -> Result<Vec<(String, Commit)>, CatalogError> {
        let mut out = Vec::new();
        let mut next = Some(self.resolve(rev)?);
        while let Some(hash) = next {
            let commit = self.load_commit(&hash)?;
            next = commit.first_parent().map(str::to_string);
            out.push((hash, commit));
        }
        Ok(out)
    }

    /// Per-table differences going from `from` to `to`, sorted by table name.
    pub fn diff(&self, from: &str, to: &str) -> Result<Vec<TableDiff>, CatalogError> {
        let a = self.tables_at(from)?;
        let b = self.tables_at(to)?;
        let names: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
        Ok(names
            .into_iter()
            .filter_map(|name| {
                let (x, y) = (a.get(name), b.get(name));
                let change = match (x, y) {
                    (None, Some(_)) => ChangeKind::Added,
                    (Some(_), None) => ChangeKind::Removed,
                    (Some(p), Some(q)) if p != q => ChangeKind::Modified,
                    _ => return None,
                };
                Some(TableDiff {
                    table_name: name.clone(),
                    change,
                    from_snapshot: x.cloned(),
                    to_snapshot: y.cloned(),
                })
            })
            .collect())
    }
}
