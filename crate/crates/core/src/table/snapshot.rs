use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::csv::{decode_csv, encode_csv};
use super::schema::{ResultSet, Schema};
use super::TableError;
use crate::canonical::{canonical_hash, sha256_hex, to_canonical_json};
use crate::object_store::{ObjectKey, ObjectStore};

/// Maximum number of rows per data file.
pub const ROWS_PER_FILE: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataFile {
    pub path: String,
    pub row_count: u64,
    pub content_hash: String,
}

/// Everything in a snapshot except its id. The id is the SHA-256 of the
/// canonical JSON of this struct, and these bytes are what the store holds
/// at `objects/<hh>/<id>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotBody {
    pub data_files: Vec<DataFile>,
    pub parent_snapshot: Option<String>,
    pub schema: Schema,
    pub table_uuid: String,
}

/// One immutable version of a table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSnapshot {
    pub snapshot_id: String,
    pub body: SnapshotBody,
}

impl TableSnapshot {
    pub fn schema(&self) -> &Schema {
        &self.body.schema
    }

    pub fn data_files(&self) -> &[DataFile] {
        &self.body.data_files
    }

    pub fn table_uuid(&self) -> &str {
        &self.body.table_uuid
    }

    pub fn parent_snapshot(&self) -> Option<&str> {
        self.body.parent_snapshot.as_deref()
    }

    pub fn row_count(&self) -> u64 {
        self.body.data_files.iter().map(|f| f.row_count).sum()
    }

    /// SHA-256 over the canonical JSON list of data-file content hashes, in
    /// file order. Independent of table uuid, parent and file paths, so two
    /// runs producing the same rows agree on it.
    pub fn content_fingerprint(&self) -> String {
        let hashes: Vec<&str> = self.body.data_files.iter().map(|f| f.content_hash.as_str()).collect();
        canonical_hash(&hashes)
    }
}

pub fn snapshot_hash(body: &SnapshotBody) -> String {
    canonical_hash(body)
}

fn check_table_uuid(table_uuid: &str) -> Result<(), TableError> {
    match Uuid::parse_str(table_uuid) {
        Ok(u) if u.hyphenated().to_string() == table_uuid => Ok(()),
        _ => Err(TableError::mismatch(None, None, format!("table uuid {table_uuid:?} is not a lowercase hyphenated UUID"))),
    }
}

/// Deterministic version-8 UUID from the first 16 bytes of `sha256(seed)`.
pub fn uuid_from_seed(seed: &str) -> String {
    let digest = hex::decode(sha256_hex(seed.as_bytes())).expect("hex");
    let mut bytes = [0u8; 16];
    bytes.copy_from_slice(&digest[..16]);
    Uuid::new_v8(bytes).hyphenated().to_string()
}

/// File names are derived from content, so identical chunks of one table
/// land at one key and rewriting identical data stores nothing new.
fn data_file_key(table_uuid: &str, content_hash: &str) -> ObjectKey {
    let file = uuid_from_seed(&format!("{table_uuid}:{content_hash}"));
    ObjectKey::new(format!("data/{table_uuid}/{file}.csv")).expect("uuid paths are valid keys")
}

/// Loads snapshot metadata by id, verifying that the stored bytes hash to it.
pub fn load_snapshot(store: &ObjectStore, snapshot_id: &str) -> Result<TableSnapshot, TableError> {
    if !crate::canonical::is_sha256_hex(snapshot_id) {
        return Err(TableError::NotFound(format!("snapshot {snapshot_id}")));
    }
    let key = ObjectKey::for_hash(snapshot_id);
    let bytes = store.get_object(&key)?;
    let corrupt = |reason: String| TableError::CorruptFile {
        path: key.to_string(),
        reason,
    };
    if sha256_hex(&bytes) != snapshot_id {
        return Err(corrupt("metadata hash mismatch".into()));
    }
    let body: SnapshotBody = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
    Ok(TableSnapshot {
        snapshot_id: snapshot_id.to_string(),
        body,
    })
}

/// Writes `rows` as a new snapshot of table `table_uuid`.
///
/// Rows are split into files of at most [`ROWS_PER_FILE`] rows. The result
/// is a pure function of the arguments: writing the same rows twice with the
/// same parent yields the same snapshot id and touches no new keys.
pub fn write_table(
    store: &ObjectStore,
    table_uuid: &str,
    schema: &Schema,
    rows: &ResultSet,
    parent: Option<&str>,
) -> Result<TableSnapshot, TableError> {
    if &rows.schema != schema {
        return Err(TableError::mismatch(None, None, "result set schema differs from the table schema"));
    }
    check_table_uuid(table_uuid)?;
    rows.validate()?;
    if let Some(parent_id) = parent {
        let parent_snap = load_snapshot(store, parent_id)?;
        if parent_snap.table_uuid() != table_uuid {
            return Err(TableError::mismatch(None, None, "parent snapshot belongs to a different table"));
        }
        parent_snap
            .schema()
            .check_evolution(schema)
            .map_err(|reason| TableError::mismatch(None, None, format!("incompatible schema evolution: {reason}")))?;
    }

    let mut data_files = Vec::new();
    for chunk in rows.rows.chunks(ROWS_PER_FILE) {
        let bytes = encode_csv(schema, chunk)?;
        let content_hash = sha256_hex(&bytes);
        let key = data_file_key(table_uuid, &content_hash);
        store.put_object(&key, &bytes)?;
        data_files.push(DataFile {
            path: key.to_string(),
            row_count: chunk.len() as u64,
            content_hash,
        });
    }

    let body = SnapshotBody {
        data_files,
        parent_snapshot: parent.map(str::to_string),
        schema: schema.clone(),
        table_uuid: table_uuid.to_string(),
    };
    let bytes = to_canonical_json(&body);
    let snapshot_id = sha256_hex(&bytes);
    store.put_object(&ObjectKey::for_hash(&snapshot_id), &bytes)?;
    Ok(TableSnapshot { snapshot_id, body })
}

/// Reads every data file of `snapshot` in order, verifying content hashes
/// and row counts.
pub fn read_table(store: &ObjectStore, snapshot: &TableSnapshot) -> Result<ResultSet, TableError> {
    let schema = snapshot.schema().clone();
    let mut rows = Vec::with_capacity(snapshot.row_count() as usize);
    for file in snapshot.data_files() {
        let key = ObjectKey::new(file.path.clone()).map_err(|e| TableError::CorruptFile {
            path: file.path.clone(),
            reason: e.to_string(),
        })?;
        let bytes = store.get_object(&key)?;
        let corrupt = |reason: String| TableError::CorruptFile {
            path: file.path.clone(),
            reason,
        };
        if sha256_hex(&bytes) != file.content_hash {
            return Err(corrupt("content hash mismatch".into()));
        }
        let file_rows = decode_csv(&schema, &bytes).map_err(|e| corrupt(e.to_string()))?;
        if file_rows.len() as u64 != file.row_count {
            return Err(corrupt(format!("expected {} rows, found {}", file.row_count, file_rows.len())));
        }
        rows.extend(file_rows);
    }
    Ok(ResultSet { schema, rows })
}
