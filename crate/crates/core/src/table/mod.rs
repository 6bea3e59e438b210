//! Iceberg-lite table layer: canonical CSV data files plus content-addressed
//! snapshot metadata.

mod csv;
mod schema;
mod snapshot;

use thiserror::Error;

use crate::object_store::StoreError;

pub use self::csv::{decode_csv, encode_csv, format_float};
pub use schema::{
    is_valid_identifier, is_valid_timestamp, validate_rows, Column, ColumnType, ResultSet, Row,
    Schema, Value,
};
pub use snapshot::{
    load_snapshot, read_table, snapshot_hash, uuid_from_seed, write_table, DataFile, SnapshotBody, TableSnapshot,
    ROWS_PER_FILE,
};

#[derive(Debug, Error)]
pub enum TableError {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("schema mismatch{}{}: {reason}", row.map(|r| format!(" at row {r}")).unwrap_or_default(), column.as_ref().map(|c| format!(", column {c}")).unwrap_or_default())]
    SchemaMismatch {
        row: Option<usize>,
        column: Option<String>,
        reason: String,
    },
    #[error("non-finite float at row {row}, column {column}")]
    NonFiniteFloat { row: usize, column: String },
    #[error("csv encoding error: {0}")]
    Encoding(String),
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: String, reason: String },
    #[error("{0} not found")]
    NotFound(String),
    #[error(transparent)]
    Store(StoreError),
}

impl TableError {
    pub fn name(&self) -> &'static str {
        match self {
            TableError::InvalidSchema(_) => "InvalidSchema",
            TableError::SchemaMismatch { .. } => "SchemaMismatch",
            TableError::NonFiniteFloat { .. } => "NonFiniteFloat",
            TableError::Encoding(_) => "EncodingError",
            TableError::CorruptFile { .. } => "CorruptFile",
            TableError::NotFound(_) => "NotFound",
            TableError::Store(e) => e.name(),
        }
    }

    pub(crate) fn mismatch(row: Option<usize>, column: Option<&str>, reason: impl Into<String>) -> Self {
        TableError::SchemaMismatch {
            row,
            column: column.map(str::to_string),
            reason: reason.into(),
        }
    }
}

impl From<StoreError> for TableError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(k) => TableError::NotFound(k),
            other => TableError::Store(other),
        }
    }
}
