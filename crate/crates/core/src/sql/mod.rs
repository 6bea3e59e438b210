//! SQL subset: `SELECT` with projection, one inner equi-join, `WHERE`,
//! `GROUP BY`, `ORDER BY` and `LIMIT`. No arithmetic, subqueries or
//! wall-clock functions, so results depend only on the input tables.

mod analyze;
pub mod ast;
mod exec;
mod parser;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

pub use ast::SelectQuery;
pub use parser::parse_sql;

use crate::table::{ResultSet, Schema};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SqlError {
    #[error("parse error at {line}:{column}: {message}{}", fmt_expected(.expected))]
    Parse {
        line: usize,
        column: usize,
        message: String,
        expected: Vec<String>,
    },
    #[error("unknown table {0}")]
    UnknownTable(String),
    #[error("unknown column {0}")]
    UnknownColumn(String),
    #[error("column {0} is ambiguous; qualify it with a table name")]
    AmbiguousColumn(String),
    #[error("type error: {0}")]
    TypeError(String),
    #[error("duplicate output column {0}")]
    DuplicateColumn(String),
    #[error("overflow: {0}")]
    Overflow(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

fn fmt_expected(expected: &[String]) -> String {
    if expected.is_empty() {
        String::new()
    } else {
        format!(" (expected one of: {})", expected.join(", "))
    }
}

impl SqlError {
    pub fn name(&self) -> &'static str {
        match self {
            SqlError::Parse { .. } => "ParseError",
            SqlError::UnknownTable(_) => "UnknownTable",
            SqlError::UnknownColumn(_) => "UnknownColumn",
            SqlError::AmbiguousColumn(_) => "AmbiguousColumn",
            SqlError::TypeError(_) => "TypeError",
            SqlError::DuplicateColumn(_) => "DuplicateColumn",
            SqlError::Overflow(_) => "OverflowError",
            SqlError::Unsupported(_) => "Unsupported",
        }
    }
}

/// Supplies input tables by name.
pub trait TableResolver {
    fn resolve_table(&self, name: &str) -> Option<&ResultSet>;
}

impl TableResolver for BTreeMap<String, ResultSet> {
    fn resolve_table(&self, name: &str) -> Option<&ResultSet> {
        self.get(name)
    }
}

impl TableResolver for HashMap<String, ResultSet> {
    fn resolve_table(&self, name: &str) -> Option<&ResultSet> {
        self.get(name)
    }
}

/// Tables a query reads: the `FROM` table plus the joined one.
pub fn extract_table_refs(query: &SelectQuery) -> BTreeSet<String> {
    let mut out = BTreeSet::from([query.from.clone()]);
    if let Some(j) = &query.join {
        out.insert(j.table.clone());
    }
    out
}

pub fn infer_output_schema(query: &SelectQuery, inputs: &BTreeMap<String, Schema>) -> Result<Schema, SqlError> {
    Ok(analyze::bind(query, inputs)?.output)
}

pub fn execute_query(query: &SelectQuery, tables: &impl TableResolver) -> Result<ResultSet, SqlError> {
    let mut schemas = BTreeMap::new();
    for name in extract_table_refs(query) {
        let t = tables.resolve_table(&name).ok_or_else(|| SqlError::UnknownTable(name.clone()))?;
        schemas.insert(name, t.schema.clone());
    }
    let bound = analyze::bind(query, &schemas)?;
    let left = tables.resolve_table(&bound.from).expect("resolved above");
    let right = bound.join.as_ref().map(|j| tables.resolve_table(&j.table).expect("resolved above"));
    exec::execute(&bound, left, right)
}

/// Parses and executes `text` in one step.
pub fn run_sql(text: &str, tables: &impl TableResolver) -> Result<ResultSet, SqlError> {
    execute_query(&parse_sql(text)?, tables)
}
