//! Immutable blob storage over a local directory tree.
//!
//! Layout under the store root:
//!
//! ```text
//! objects/<hh>/<rest-of-hash>     canonical JSON metadata, commits, code blobs
//! data/<table-uuid>/<file>.csv    data files
//! refs/<refname>                  commit hash + LF
//! runstore/...                    run manifests and the run-id counter
//! ```
//!
//! Keys under `objects/` and `data/` are write-once. Everything else may be
//! overwritten, and `refs/` and `runstore/` additionally support
//! [`ObjectStore::compare_and_set`].

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

const IMMUTABLE_PREFIXES: [&str; 2] = ["objects/", "data/"];
const CAS_PREFIXES: [&str; 2] = ["refs/", "runstore/"];
const TMP_DIR: &str = ".tmp";
const LOCK_DIR: &str = ".locks";
const CAS_LOCK: &str = "cas";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid object key {key:?}: {reason}")]
    InvalidKey { key: String, reason: &'static str },
    #[error("object {0} not found")]
    NotFound(String),
    #[error("object {0} is immutable and already holds different content")]
    ImmutableOverwrite(String),
    #[error("compare-and-set is only allowed under refs/ or runstore/, got {0}")]
    NotMutable(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl StoreError {
    pub fn name(&self) -> &'static str {
        match self {
            StoreError::InvalidKey { .. } => "InvalidKey",
            StoreError::NotFound(_) => "NotFound",
            StoreError::ImmutableOverwrite(_) => "ImmutableOverwrite",
            StoreError::NotMutable(_) => "NotMutable",
            StoreError::Io { .. } => "IoFailure",
        }
    }
}

fn io_err(path: impl AsRef<Path>, source: io::Error) -> StoreError {
    StoreError::Io {
        path: path.as_ref().display().to_string(),
        source,
    }
}

/// A validated, slash-separated object key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectKey(String);

impl ObjectKey {
    pub fn new(key: impl Into<String>) -> Result<Self, StoreError> {
        let key = key.into();
        let invalid = |reason| StoreError::InvalidKey {
            key: key.clone(),
            reason,
        };
        if key.is_empty() {
            return Err(invalid("empty key"));
        }
        if key.starts_with('/') {
            return Err(invalid("leading slash"));
        }
        for (i, seg) in key.split('/').enumerate() {
            if seg.is_empty() {
                return Err(invalid("empty segment"));
            }
            if seg == "." || seg == ".." {
                return Err(invalid("relative segment"));
            }
            if !seg
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
            {
                return Err(invalid("segment must match [A-Za-z0-9._-]+"));
            }
            if i == 0 && (seg == TMP_DIR || seg == LOCK_DIR) {
                return Err(invalid("reserved top-level segment"));
            }
        }
        Ok(Self(key))
    }

    /// Key for a content-addressed object: `objects/<hh>/<rest>`.
    pub fn for_hash(hash: &str) -> Self {
        debug_assert!(hash.len() > 2);
        Self(format!("objects/{}/{}", &hash[..2], &hash[2..]))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_immutable(&self) -> bool {
        IMMUTABLE_PREFIXES.iter().any(|p| self.0.starts_with(p))
    }

    fn is_cas_target(&self) -> bool {
        CAS_PREFIXES.iter().any(|p| self.0.starts_with(p))
    }
}

impl fmt::Display for ObjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<&str> for ObjectKey {
    type Error = StoreError;
    fn try_from(value: &str) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

/// Handle to a store rooted at a local directory. Cheap to clone.
#[derive(Debug, Clone)]
pub struct ObjectStore {
    root: Arc<PathBuf>,
}

impl ObjectStore {
    /// Opens (creating if needed) a store at `root`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref();
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        let root = root.canonicalize().map_err(|e| io_err(root, e))?;
        for dir in [TMP_DIR, LOCK_DIR] {
            let p = root.join(dir);
            fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
        }
        let lock = root.join(LOCK_DIR).join(CAS_LOCK);
        OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock)
            .map_err(|e| io_err(&lock, e))?;
        Ok(Self {
            root: Arc::new(root),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_of(&self, key: &ObjectKey) -> PathBuf {
        // Keys are validated, so joining segment-wise cannot escape the root.
        let mut p = (*self.root).clone();
        p.extend(key.as_str().split('/'));
        p
    }

    /// Writes `data` under `key` atomically.
    ///
    /// Under `objects/` and `data/`, a second put with identical bytes is a
    /// no-op and a put with different bytes fails with
    /// [`StoreError::ImmutableOverwrite`].
    pub fn put_object(&self, key: &ObjectKey, data: &[u8]) -> Result<(), StoreError> {
        let target = self.path_of(key);
        if key.is_immutable() {
            match fs::read(&target) {
                Ok(existing) => return self.check_same(key, &existing, data),
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(io_err(&target, e)),
            }
        }
        self.ensure_parent(&target)?;
        let tmp = self.write_temp(data)?;
        if key.is_immutable() {
            // hard_link refuses to clobber, so a racing writer with other
            // bytes is detected instead of silently replaced.
            let linked = fs::hard_link(tmp.path(), &target);
            drop(tmp);
            match linked {
                Ok(()) => Ok(()),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    let existing = fs::read(&target).map_err(|e| io_err(&target, e))?;
                    self.check_same(key, &existing, data)
                }
                Err(e) => Err(io_err(&target, e)),
            }
        } else {
            tmp.persist(&target).map_err(|e| io_err(&target, e.error))?;
            Ok(())
        }
    }

    fn check_same(&self, key: &ObjectKey, existing: &[u8], data: &[u8]) -> Result<(), StoreError> {
        if existing == data {
            Ok(())
        } else {
            Err(StoreError::ImmutableOverwrite(key.to_string()))
        }
    }

    fn ensure_parent(&self, target: &Path) -> Result<(), StoreError> {
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        Ok(())
    }

    fn write_temp(&self, data: &[u8]) -> Result<tempfile::NamedTempFile, StoreError> {
        let dir = self.root.join(TMP_DIR);
        let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| io_err(&dir, e))?;
        tmp.write_all(data).map_err(|e| io_err(tmp.path(), e))?;
        tmp.as_file().sync_all().map_err(|e| io_err(tmp.path(), e))?;
        Ok(tmp)
    }

    pub fn get_object(&self, key: &ObjectKey) -> Result<Vec<u8>, StoreError> {
        let path = self.path_of(key);
        fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::NotFound(key.to_string()),
            // A key whose parent is a file rather than a directory.
            io::ErrorKind::NotADirectory => StoreError::NotFound(key.to_string()),
            _ => io_err(&path, e),
        })
    }

    /// Like [`get_object`](Self::get_object) but maps `NotFound` to `None`.
    pub fn try_get_object(&self, key: &ObjectKey) -> Result<Option<Vec<u8>>, StoreError> {
        match self.get_object(key) {
            Ok(v) => Ok(Some(v)),
            Err(StoreError::NotFound(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn exists(&self, key: &ObjectKey) -> bool {
        self.path_of(key).is_file()
    }

    /// All keys starting with `prefix`, sorted by code point.
    pub fn list_prefix(&self, prefix: &str) -> Result<Vec<ObjectKey>, StoreError> {
        let mut out = Vec::new();
        // Only descend into the directory that can contain matches.
        let (dir_part, start) = match prefix.rfind('/') {
            Some(i) => (&prefix[..i], self.root.join(&prefix[..i])),
            None => ("", (*self.root).clone()),
        };
        if dir_part.split('/').any(|s| s == ".." || s == ".") {
            return Ok(out);
        }
        let base = if dir_part.is_empty() {
            String::new()
        } else {
            format!("{dir_part}/")
        };
        self.walk(&start, &base, prefix, &mut out)?;
        out.sort();
        Ok(out)
    }

    fn walk(
        &self,
        dir: &Path,
        rel: &str,
        prefix: &str,
        out: &mut Vec<ObjectKey>,
    ) -> Result<(), StoreError> {
        let entries = match fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) if matches!(e.kind(), io::ErrorKind::NotFound | io::ErrorKind::NotADirectory) => {
                return Ok(())
            }
            Err(e) => return Err(io_err(dir, e)),
        };
        for entry in entries {
            let entry = entry.map_err(|e| io_err(dir, e))?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if rel.is_empty() && (name == TMP_DIR || name == LOCK_DIR) {
                continue;
            }
            let key = format!("{rel}{name}");
            let ft = entry.file_type().map_err(|e| io_err(entry.path(), e))?;
            if ft.is_dir() {
                let sub = format!("{key}/");
                if sub.starts_with(prefix) || prefix.starts_with(&sub) {
                    self.walk(&entry.path(), &sub, prefix, out)?;
                }
            } else if ft.is_file() && key.starts_with(prefix) {
                if let Ok(k) = ObjectKey::new(key) {
                    out.push(k);
                }
            }
        }
        Ok(())
    }

    /// Atomically replaces the content of `key` iff it currently equals
    /// `expected` (`None` meaning "absent"). Returns whether the swap happened.
    ///
    /// Serialized through one exclusive lock file per store, so it is
    /// linearizable across threads and processes on one machine and a swap
    /// leaves no files behind other than `key` itself.
    pub fn compare_and_set(
        &self,
        key: &ObjectKey,
        expected: Option<&[u8]>,
        new: &[u8],
    ) -> Result<bool, StoreError> {
        if !key.is_cas_target() {
            return Err(StoreError::NotMutable(key.to_string()));
        }
        let lock_path = self.root.join(LOCK_DIR).join(CAS_LOCK);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| io_err(&lock_path, e))?;
        lock.lock().map_err(|e| io_err(&lock_path, e))?;
        let result = self.cas_locked(key, expected, new);
        let _ = File::unlock(&lock);
        result
    }

    fn cas_locked(
        &self,
        key: &ObjectKey,
        expected: Option<&[u8]>,
        new: &[u8],
    ) -> Result<bool, StoreError> {
        let current = self.try_get_object(key)?;
        if current.as_deref() != expected {
            return Ok(false);
        }
        let target = self.path_of(key);
        self.ensure_parent(&target)?;
        let tmp = self.write_temp(new)?;
        tmp.persist(&target).map_err(|e| io_err(&target, e.error))?;
        Ok(true)
    }
}
