use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;

use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use super::TableError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Int64,
    Float64,
    Bool,
    String,
    Timestamp,
}

impl ColumnType {
    pub fn name(self) -> &'static str {
        match self {
            ColumnType::Int64 => "int64",
            ColumnType::Float64 => "float64",
            ColumnType::Bool => "bool",
            ColumnType::String => "string",
            ColumnType::Timestamp => "timestamp",
        }
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, ColumnType::Int64 | ColumnType::Float64)
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ColumnType,
    pub nullable: bool,
}

impl Column {
    pub fn new(name: impl Into<String>, ty: ColumnType, nullable: bool) -> Self {
        Self {
            name: name.into(),
            ty,
            nullable,
        }
    }
}

/// `[a-z_][a-z0-9_]*`
pub fn is_valid_identifier(s: &str) -> bool {
    let mut bytes = s.bytes();
    match bytes.next() {
        Some(b) if b.is_ascii_lowercase() || b == b'_' => {}
        _ => return false,
    }
    bytes.all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

/// `YYYY-MM-DDTHH:MM:SSZ`, calendar-valid.
pub fn is_valid_timestamp(s: &str) -> bool {
    s.len() == 20
        && s.as_bytes()[19] == b'Z'
        && s.as_bytes()[..4].iter().all(u8::is_ascii_digit)
        && chrono::NaiveDateTime::parse_from_str(&s[..19], "%Y-%m-%dT%H:%M:%S").is_ok()
}

/// Ordered, non-empty list of uniquely named columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema")]
pub struct Schema {
    columns: Vec<Column>,
}

#[derive(Deserialize)]
struct RawSchema {
    columns: Vec<Column>,
}

impl TryFrom<RawSchema> for Schema {
    type Error = TableError;
    fn try_from(raw: RawSchema) -> Result<Self, Self::Error> {
        Schema::new(raw.columns)
    }
}

impl Schema {
    pub fn new(columns: Vec<Column>) -> Result<Self, TableError> {
        if columns.is_empty() {
            return Err(TableError::InvalidSchema("at least one column is required".into()));
        }
        let mut seen = HashSet::new();
        for c in &columns {
            if !is_valid_identifier(&c.name) {
                return Err(TableError::InvalidSchema(format!(
                    "column name {:?} must match [a-z_][a-z0-9_]*",
                    c.name
                )));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(TableError::InvalidSchema(format!("duplicate column {:?}", c.name)));
            }
        }
        Ok(Self { columns })
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Checks that a new snapshot with schema `next` may follow one with
    /// `self`: existing columns keep their position, name and nullability
    /// (int64 may widen to float64) and any extra columns are nullable.
    pub fn check_evolution(&self, next: &Schema) -> Result<(), String> {
        if next.columns.len() < self.columns.len() {
            return Err("columns cannot be dropped".into());
        }
        for (old, new) in self.columns.iter().zip(&next.columns) {
            if old.name != new.name {
                return Err(format!("column {} cannot be renamed or reordered", old.name));
            }
            let widened = old.ty == ColumnType::Int64 && new.ty == ColumnType::Float64;
            if old.ty != new.ty && !widened {
                return Err(format!("column {} cannot change type {} -> {}", old.name, old.ty, new.ty));
            }
            if old.nullable != new.nullable {
                return Err(format!("column {} cannot change nullability", old.name));
            }
        }
        if let Some(c) = next.columns[self.columns.len()..].iter().find(|c| !c.nullable) {
            return Err(format!("added column {} must be nullable", c.name));
        }
        Ok(())
    }
}

/// One typed cell. Timestamps carry their canonical `YYYY-MM-DDTHH:MM:SSZ`
/// text, which orders lexicographically in time order.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Null,
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    Timestamp(String),
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    /// Whether this value may be stored in a column of type `ty`.
    /// Null is accepted here; nullability is checked separately.
    pub fn conforms_to(&self, ty: ColumnType) -> bool {
        match (self, ty) {
            (Value::Null, _) => true,
            (Value::Int(_), ColumnType::Int64)
            | (Value::Float(_), ColumnType::Float64)
            | (Value::Bool(_), ColumnType::Bool)
            | (Value::Str(_), ColumnType::String) => true,
            (Value::Timestamp(t), ColumnType::Timestamp) => is_valid_timestamp(t),
            _ => false,
        }
    }

    /// Ordering between two non-null values of compatible types; int and
    /// float compare as float. Returns `None` when either side is null or
    /// the types are incomparable.
    pub fn compare(&self, other: &Value) -> Option<Ordering> {
        use Value::*;
        match (self, other) {
            (Int(a), Int(b)) => Some(a.cmp(b)),
            (Float(a), Float(b)) => a.partial_cmp(b),
            (Int(a), Float(b)) => (*a as f64).partial_cmp(b),
            (Float(a), Int(b)) => a.partial_cmp(&(*b as f64)),
            (Bool(a), Bool(b)) => Some(a.cmp(b)),
            (Str(a), Str(b)) | (Timestamp(a), Timestamp(b)) | (Str(a), Timestamp(b)) | (Timestamp(a), Str(b)) => {
                Some(a.cmp(b))
            }
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("NULL"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => f.write_str(&super::format_float(*x)),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Str(s) | Value::Timestamp(s) => f.write_str(s),
        }
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Null => s.serialize_unit(),
            Value::Int(i) => s.serialize_i64(*i),
            Value::Float(x) => s.serialize_f64(*x),
            Value::Bool(b) => s.serialize_bool(*b),
            Value::Str(v) | Value::Timestamp(v) => s.serialize_str(v),
        }
    }
}

pub type Row = Vec<Value>;

/// In-memory typed rows; the dataframe every step consumes and produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultSet {
    pub schema: Schema,
    pub rows: Vec<Row>,
}

impl ResultSet {
    pub fn new(schema: Schema, rows: Vec<Row>) -> Self {
        Self { schema, rows }
    }

    pub fn empty(schema: Schema) -> Self {
        Self { schema, rows: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), TableError> {
        validate_rows(&self.schema, &self.rows)
    }
}

/// Checks arity, declared types, nullability and float finiteness.
pub fn validate_rows(schema: &Schema, rows: &[Row]) -> Result<(), TableError> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != schema.len() {
            return Err(TableError::mismatch(
                Some(i),
                None,
                format!("row has {} values, schema has {} columns", row.len(), schema.len()),
            ));
        }
        for (v, col) in row.iter().zip(schema.columns()) {
            if v.is_null() {
                if !col.nullable {
                    return Err(TableError::mismatch(Some(i), Some(&col.name), "null in non-nullable column"));
                }
                continue;
            }
            if !v.conforms_to(col.ty) {
                return Err(TableError::mismatch(
                    Some(i),
                    Some(&col.name),
                    format!("value {v:?} does not conform to {}", col.ty),
                ));
            }
            if let Value::Float(x) = v {
                if !x.is_finite() {
                    return Err(TableError::NonFiniteFloat {
                        row: i,
                        column: col.name.clone(),
                    });
                }
            }
        }
    }
    Ok(())
}
