//! Pipeline projects: a directory of `<name>.sql`, `<name>.step.json` and
//! `<name>.check.sql` files, loaded into a DAG whose edges come from the
//! tables each step reads.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{canonical_hash, sha256_hex};
use crate::sql::{extract_table_refs, parse_sql, SelectQuery, SqlError};
use crate::table::{is_valid_identifier, Schema};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("step {0} is defined more than once")]
    DuplicateStep(String),
    #[error("invalid step manifest {file}: {reason}")]
    ManifestError { file: String, reason: String },
    #[error("{file}: {source}")]
    Parse {
        file: String,
        #[source]
        source: SqlError,
    },
    #[error("invalid step name {0:?}: must match [a-z_][a-z0-9_]*")]
    InvalidStepName(String),
    #[error("dependency cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn name(&self) -> &'static str {
        match self {
            PipelineError::DuplicateStep(_) => "DuplicateStep",
            PipelineError::ManifestError { .. } => "ManifestError",
            PipelineError::Parse { .. } => "ParseError",
            PipelineError::InvalidStepName(_) => "InvalidStepName",
            PipelineError::CycleDetected(_) => "CycleDetected",
            PipelineError::Io { .. } => "IoFailure",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Contents of a `<name>.step.json` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSpec {
    pub command: Vec<String>,
    pub inputs: Vec<String>,
    pub output_schema: Schema,
    pub environment_fingerprint: String,
    pub deterministic: bool,
    #[serde(default)]
    pub code_files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepKind {
    Sql { sql_text: String, query: SelectQuery },
    External(ExternalSpec),
    /// Must produce a single bool column that is non-empty and all true.
    Expectation { sql_text: String, query: SelectQuery },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// Also the name of the table the step produces.
    pub name: String,
    pub kind: StepKind,
}

impl Step {
    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            StepKind::Sql { .. } => "sql",
            StepKind::External(_) => "external",
            StepKind::Expectation { .. } => "expectation",
        }
    }

    /// Tables this step reads.
    pub fn inputs(&self) -> BTreeSet<String> {
        match &self.kind {
            StepKind::Sql { query, .. } | StepKind::Expectation { query, .. } => extract_table_refs(query),
            StepKind::External(spec) => spec.inputs.iter().cloned().collect(),
        }
    }

    pub fn is_expectation(&self) -> bool {
        matches!(self.kind, StepKind::Expectation { .. })
    }

    /// Whether re-running on the same inputs must give the same output.
    pub fn deterministic(&self) -> bool {
        match &self.kind {
            StepKind::External(spec) => spec.deterministic,
            _ => true,
        }
    }

    pub fn environment_fingerprint(&self) -> Option<&str> {
        match &self.kind {
            StepKind::External(spec) => Some(&spec.environment_fingerprint),
            _ => None,
        }
    }
}

fn classify(file: &str) -> Option<(&str, &'static str)> {
    for suffix in [".check.sql", ".step.json", ".sql"] {
        if let Some(stem) = file.strip_suffix(suffix) {
            return Some((stem, suffix));
        }
    }
    None
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>, PipelineError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        if let Some(name) = entry.file_name().to_str() {
            out.push((name.to_string(), path));
        }
    }
    out.sort();
    Ok(out)
}

fn parse_manifest(file: &str, bytes: &[u8]) -> Result<ExternalSpec, PipelineError> {
    let bad = |reason: String| PipelineError::ManifestError {
        file: file.to_string(),
        reason,
    };
    let spec: ExternalSpec = serde_json::from_slice(bytes).map_err(|e| bad(e.to_string()))?;
    if spec.command.is_empty() {
        return Err(bad("command must not be empty".into()));
    }
    for input in &spec.inputs {
        if !is_valid_identifier(input) {
            return Err(bad(format!("input {input:?} is not a valid table name")));
        }
    }
    for path in &spec.code_files {
        if !is_safe_relative(path) {
            return Err(bad(format!("code file {path:?} must be a relative path inside the project")));
        }
    }
    Ok(spec)
}

fn is_safe_relative(path: &str) -> bool {
    !path.is_empty() && Path::new(path).components().all(|c| matches!(c, Component::Normal(_)))
}

/// Loads every step file in `dir`, in file name order.
pub fn load_project(dir: &Path) -> Result<Vec<Step>, PipelineError> {
    let mut steps: Vec<Step> = Vec::new();
    let mut seen = BTreeSet::new();
    for (file, path) in sorted_entries(dir)? {
        let Some((name, suffix)) = classify(&file) else {
            continue;
        };
        if !is_valid_identifier(name) {
            return Err(PipelineError::InvalidStepName(file));
        }
        if !seen.insert(name.to_string()) {
            return Err(PipelineError::DuplicateStep(name.to_string()));
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let kind = if suffix == ".step.json" {
            StepKind::External(parse_manifest(&file, &bytes)?)
        } else {
            let sql_text = String::from_utf8(bytes).map_err(|_| PipelineError::ManifestError {
                file: file.clone(),
                reason: "not valid UTF-8".into(),
            })?;
            let query = parse_sql(&sql_text).map_err(|source| PipelineError::Parse {
                file: file.clone(),
                source,
            })?;
            if suffix == ".check.sql" {
                StepKind::Expectation { sql_text, query }
            } else {
                StepKind::Sql { sql_text, query }
            }
        };
        steps.push(Step {
            name: name.to_string(),
            kind,
        });
    }
    Ok(steps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineGraph {
    pub steps: BTreeMap<String, Step>,
    /// `(producer, consumer)` pairs.
    pub edges: BTreeSet<(String, String)>,
    /// Tables read but not produced by any step.
    pub source_tables: BTreeSet<String>,
}

impl PipelineGraph {
    pub fn parents<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges.iter().filter(move |(_, c)| c == name).map(|(p, _)| p.as_str())
    }

    pub fn children<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges.iter().filter(move |(p, _)| p == name).map(|(_, c)| c.as_str())
    }
}

pub fn build_dag(steps: Vec<Step>) -> Result<PipelineGraph, PipelineError> {
    let mut by_name = BTreeMap::new();
    for s in steps {
        let name = s.name.clone();
        if by_name.insert(name.clone(), s).is_some() {
            return Err(PipelineError::DuplicateStep(name));
        }
    }
    let mut edges = BTreeSet::new();
    let mut source_tables = BTreeSet::new();
    for (name, step) in &by_name {
        for t in step.inputs() {
            if by_name.contains_key(&t) {
                edges.insert((t, name.clone()));
            } else {
                source_tables.insert(t);
            }
        }
    }
    let graph = PipelineGraph {
        steps: by_name,
        edges,
        source_tables,
    };
    if let Some(cycle) = find_cycle(&graph) {
        return Err(PipelineError::CycleDetected(cycle));
    }
    Ok(graph)
}

/// Returns one cycle as a closed walk `[a, b, ..., a]`, if any.
fn find_cycle(g: &PipelineGraph) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    fn visit<'a>(
        g: &'a PipelineGraph,
        n: &'a str,
        marks: &mut BTreeMap<&'a str, Mark>,
        stack: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        marks.insert(n, Mark::Active);
        stack.push(n);
        for c in g.children(n) {
            match marks[c] {
                Mark::Active => {
                    let start = stack.iter().position(|s| *s == c).unwrap();
                    let mut cycle: Vec<String> = stack[start..].iter().map(|s| s.to_string()).collect();
                    cycle.push(c.to_string());
                    return Some(cycle);
                }
                Mark::New => {
                    if let Some(found) = visit(g, c, marks, stack) {
                        return Some(found);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        marks.insert(n, Mark::Done);
        None
    }
    let mut marks: BTreeMap<&str, Mark> = g.steps.keys().map(|k| (k.as_str(), Mark::New)).collect();
    for n in g.steps.keys() {
        if marks[n.as_str()] == Mark::New {
            if let Some(c) = visit(g, n, &mut marks, &mut Vec::new()) {
                return Some(c);
            }
        }
    }
    None
}

/// Kahn's algorithm, always taking the lexicographically smallest ready step.
pub fn topo_order(graph: &PipelineGraph) -> Vec<String> {
    let mut indegree: BTreeMap<&str, usize> = graph.steps.keys().map(|k| (k.as_str(), 0)).collect();
    for (_, c) in &graph.edges {
        *indegree.get_mut(c.as_str()).unwrap() += 1;
    }
    let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
    let mut order = Vec::with_capacity(graph.steps.len());
    while let Some(n) = ready.pop_first() {
        order.push(n.to_string());
        for c in graph.children(n) {
            let d = indegree.get_mut(c).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(c);
            }
        }
    }
    order
}

/// The files that make up a project's code, with their content hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSnapshot {
    pub hash: String,
    pub blobs: BTreeMap<String, Vec<u8>>,
}

/// SHA-256 of the canonical JSON list `[[path, sha256(bytes)], ...]`,
/// sorted by path.
pub fn hash_code_blobs(blobs: &BTreeMap<String, Vec<u8>>) -> String {
    let pairs: Vec<serde_json::Value> = blobs
        .iter()
        .map(|(path, bytes)| serde_json::json!([path, sha256_hex(bytes)]))
        .collect();
    canonical_hash(&serde_json::Value::Array(pairs))
}

pub fn code_snapshot_hash(dir: &Path) -> Result<CodeSnapshot, PipelineError> {
    let mut blobs = BTreeMap::new();
    let mut extra = BTreeSet::new();
    for (file, path) in sorted_entries(dir)? {
        let Some((_, suffix)) = classify(&file) else {
            continue;
        };
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if suffix == ".step.json" {
            extra.extend(parse_manifest(&file, &bytes)?.code_files);
        }
        blobs.insert(file, bytes);
    }
    for rel in extra {
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        blobs.insert(rel, bytes);
    }
    Ok(CodeSnapshot {
        hash: hash_code_blobs(&blobs),
        blobs,
    })
}
