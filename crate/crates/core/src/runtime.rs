//! Plans and executes pipeline runs.
//!
//! Sources are read at a pinned input commit, steps run in topological
//! order, and every successful output lands on the target branch in a single
//! commit guarded by compare-and-set on the head seen at planning time.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use thiserror::Error;

use crate::canonical::{canonical_hash, sha256_hex};
use crate::catalog::{Catalog, CatalogError, MergeOutcome, TableUpdate};
use crate::pipeline::{build_dag, code_snapshot_hash, load_project, CodeSnapshot, ExternalSpec, PipelineError, PipelineGraph, Step, StepKind};
use crate::run_store::{
    allocate_run_id, compare_runs, host_descriptor, resolve_replay, save_manifest, store_code_blobs, RunManifest, RunStatus,
    RunStoreError, StepResult, StepStatus, StepVerdict,
};
use crate::sql::{execute_query, SqlError};
use crate::table::{decode_csv, encode_csv, load_snapshot, read_table, uuid_from_seed, write_table, ColumnType, ResultSet, TableError, Value};

/// Captured stdout/stderr of external steps is cut to this many bytes.
pub const OUTPUT_CAPTURE_LIMIT: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("the pipeline has no steps")]
    EmptyPipeline,
    #[error("source table {table} does not exist at commit {commit}")]
    MissingSource { table: String, commit: String },
    #[error("a replay may not write to the branch of the original run ({0})")]
    ReplayOntoOriginal(String),
    #[error("expectations failed: {}", .0.join("; "))]
    ChecksFailed(Vec<String>),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    RunStore(#[from] RunStoreError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl RuntimeError {
    pub fn name(&self) -> &'static str {
        match self {
            RuntimeError::EmptyPipeline => "EmptyPipeline",
            RuntimeError::MissingSource { .. } => "MissingSource",
            RuntimeError::ReplayOntoOriginal(_) => "ReplayOntoOriginal",
            RuntimeError::ChecksFailed(_) => "ChecksFailed",
            RuntimeError::Catalog(e) => e.name(),
            RuntimeError::Table(e) => e.name(),
            RuntimeError::Pipeline(e) => e.name(),
            RuntimeError::RunStore(e) => e.name(),
            RuntimeError::Io { .. } => "IoFailure",
        }
    }
}

/// Why a single step failed. Recorded in the manifest, never fatal to the run.
#[derive(Debug, Error)]
pub enum StepFailure {
    #[error("command exited with {}", .0.map_or("a signal".to_string(), |c| format!("status {c}")))]
    NonzeroExit(Option<i32>),
    #[error("command did not write its output file {0}")]
    OutputMissing(PathBuf),
    #[error("{0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error("{0}")]
    ExpectationFailed(String),
    #[error("could not start command: {0}")]
    Spawn(String),
    #[error("{0}")]
    Storage(String),
}

impl StepFailure {
    pub fn name(&self) -> &'static str {
        match self {
            StepFailure::NonzeroExit(_) => "NonzeroExit",
            StepFailure::OutputMissing(_) => "OutputMissing",
            StepFailure::SchemaMismatch(_) => "SchemaMismatch",
            StepFailure::Sql(e) => e.name(),
            StepFailure::ExpectationFailed(_) => "ExpectationFailed",
            StepFailure::Spawn(_) => "SpawnFailed",
            StepFailure::Storage(_) => "StorageFailure",
        }
    }

    fn describe(&self) -> String {
        format!("{}: {self}", self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub graph: PipelineGraph,
    /// Commit all sources are read from.
    pub input_commit: String,
    pub target_ref: String,
    /// Head the output commit must build on; equals `input_commit` except
    /// for replays, which read old inputs but land on a newer branch head.
    pub target_head: String,
    pub step_order: Vec<String>,
    pub resolved_sources: BTreeMap<String, String>,
}

/// Plans a run reading from the current head of `target_ref`.
pub fn plan_run(catalog: &Catalog, graph: PipelineGraph, target_ref: &str) -> Result<RunPlan, RuntimeError> {
    let head = catalog.head(target_ref)?;
    plan_run_at(catalog, graph, target_ref, &head)
}

/// Plans a run reading sources at `input_commit` and landing on `target_ref`.
pub fn plan_run_at(
    catalog: &Catalog,
    graph: PipelineGraph,
    target_ref: &str,
    input_commit: &str,
) -> Result<RunPlan, RuntimeError> {
    if graph.steps.is_empty() {
        return Err(RuntimeError::EmptyPipeline);
    }
    catalog.check_commit_permission(target_ref)?;
    let target_head = catalog.head(target_ref)?;
    let input_commit = catalog.resolve(input_commit)?;
    let tables = catalog.load_commit(&input_commit)?.tables;
    let mut resolved_sources = BTreeMap::new();
    for source in &graph.source_tables {
        let id = tables.get(source).ok_or_else(|| RuntimeError::MissingSource {
            table: source.clone(),
            commit: input_commit.clone(),
        })?;
        resolved_sources.insert(source.clone(), id.clone());
    }
    Ok(RunPlan {
        step_order: crate::pipeline::topo_order(&graph),
        graph,
        input_commit,
        target_ref: target_ref.to_string(),
        target_head,
        resolved_sources,
    })
}

/// Where a step runs.
#[derive(Debug, Clone)]
pub struct StepContext {
    /// Working directory of external commands (the project directory).
    pub work_dir: PathBuf,
    /// Per-run directory for CSV handoff.
    pub scratch_dir: PathBuf,
    pub run_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub result: ResultSet,
    pub stdout: Option<String>,
    pub stderr: Option<String>,
}

/// Runs one step over its already-materialized inputs.
pub fn execute_step(
    step: &Step,
    inputs: &BTreeMap<String, ResultSet>,
    ctx: &StepContext,
) -> Result<StepOutput, StepFailure> {
    match &step.kind {
        StepKind::Sql { query, .. } => Ok(StepOutput {
            result: execute_query(query, inputs)?,
            stdout: None,
            stderr: None,
        }),
        StepKind::Expectation { query, .. } => {
            let result = execute_query(query, inputs)?;
            check_expectation(&result)?;
            Ok(StepOutput {
                result,
                stdout: None,
                stderr: None,
            })
        }
        StepKind::External(spec) => {
            let dir = ctx.scratch_dir.join(&step.name);
            let storage = |e: io::Error| StepFailure::Storage(format!("scratch directory {}: {e}", dir.display()));
            fs::create_dir_all(&dir).map_err(storage)?;
            let mut input_paths = BTreeMap::new();
            for name in &spec.inputs {
                let table = inputs
                    .get(name)
                    .ok_or_else(|| StepFailure::Storage(format!("input table {name} is not available")))?;
                let bytes = encode_csv(&table.schema, &table.rows).map_err(|e| StepFailure::Storage(e.to_string()))?;
                let path = dir.join(format!("input_{name}.csv"));
                fs::write(&path, bytes).map_err(storage)?;
                input_paths.insert(name.clone(), path);
            }
            let output_path = dir.join("output.csv");
            let _ = fs::remove_file(&output_path);
            let (stdout, stderr) = run_external(&step.name, spec, &input_paths, &output_path, ctx)?;
            let bytes = fs::read(&output_path).map_err(|_| StepFailure::OutputMissing(output_path.clone()))?;
            let rows = decode_csv(&spec.output_schema, &bytes)
                .map_err(|e| StepFailure::SchemaMismatch(format!("output does not match the declared schema: {e}")))?;
            Ok(StepOutput {
                result: ResultSet::new(spec.output_schema.clone(), rows),
                stdout: Some(stdout),
                stderr: Some(stderr),
            })
        }
    }
}

/// Requires one bool column with at least one row, every row true.
fn check_expectation(result: &ResultSet) -> Result<(), StepFailure> {
    let cols = result.schema.columns();
    if cols.len() != 1 || cols[0].ty != ColumnType::Bool {
        return Err(StepFailure::SchemaMismatch(
            "an expectation must return exactly one bool column".into(),
        ));
    }
    if result.rows.is_empty() {
        return Err(StepFailure::ExpectationFailed("expectation returned no rows".into()));
    }
    if let Some(i) = result.rows.iter().position(|r| r[0] != Value::Bool(true)) {
        return Err(StepFailure::ExpectationFailed(format!(
            "row {i} of column {} is {}",
            cols[0].name, result.rows[i][0]
        )));
    }
    Ok(())
}

fn truncate_capture(bytes: &[u8]) -> String {
    let cut = &bytes[..bytes.len().min(OUTPUT_CAPTURE_LIMIT)];
    String::from_utf8_lossy(cut).into_owned()
}

/// Invokes an external step's command. On success returns captured
/// stdout and stderr; the caller validates the output file.
pub fn run_external(
    step_name: &str,
    spec: &ExternalSpec,
    input_paths: &BTreeMap<String, PathBuf>,
    output_path: &Path,
    ctx: &StepContext,
) -> Result<(String, String), StepFailure> {
    let mut cmd = Command::new(&spec.command[0]);
    cmd.args(&spec.command[1..])
        .current_dir(&ctx.work_dir)
        .env("BPLN_OUTPUT", output_path)
        .env("BPLN_RUN_ID", ctx.run_id.to_string())
        .env("BPLN_STEP_NAME", step_name);
    for (name, path) in input_paths {
        cmd.env(format!("BPLN_INPUT_{}", name.to_ascii_uppercase()), path);
    }
    let out = cmd.output().map_err(|e| StepFailure::Spawn(format!("{:?}: {e}", spec.command[0])))?;
    if !out.status.success() {
        log::info!("step {step_name} stderr: {}", truncate_capture(&out.stderr));
        return Err(StepFailure::NonzeroExit(out.status.code()));
    }
    Ok((truncate_capture(&out.stdout), truncate_capture(&out.stderr)))
}

/// Progress notifications, delivered synchronously from the run's thread.
#[derive(Debug, Clone, PartialEq)]
pub enum RunEvent {
    StepFinished { step: String, status: StepStatus },
    Committed { commit: String },
}

pub struct RunOptions<'a> {
    pub run_id: u64,
    pub work_dir: &'a Path,
    pub all_or_nothing: bool,
    pub replay_of: Option<u64>,
    pub observer: Option<&'a (dyn Fn(&RunEvent) + Sync)>,
}

struct Landed {
    snapshot_id: String,
    fingerprint: String,
}

/// Writes a step's output as a new snapshot. A table that already exists at
/// the input commit keeps its lineage when the schema may evolve; otherwise
/// a fresh lineage is started.
fn land_output(catalog: &Catalog, input_commit: &str, name: &str, result: &ResultSet) -> Result<Landed, TableError> {
    let store = catalog.store();
    let existing = match catalog.load_commit(input_commit) {
        Ok(c) => c.tables.get(name).cloned(),
        Err(e) => return Err(TableError::NotFound(e.to_string())),
    };
    let mut lineage = None;
    if let Some(id) = existing {
        let prev = load_snapshot(store, &id)?;
        if prev.schema().check_evolution(&result.schema).is_ok() {
            lineage = Some((prev.table_uuid().to_string(), Some(id)));
        } else {
            log::warn!("table {name}: schema change is not an allowed evolution; starting a new table lineage");
        }
    }
    let (uuid, parent) = lineage.unwrap_or_else(|| (uuid_from_seed(&format!("{input_commit}/{name}")), None));
    let snap = write_table(store, &uuid, &result.schema, result, parent.as_deref())?;
    Ok(Landed {
        fingerprint: snap.content_fingerprint(),
        snapshot_id: snap.snapshot_id,
    })
}

/// Writes `rows` as table `name` on `branch` in a commit of its own.
/// Returns the new commit and snapshot ids.
pub fn import_table(catalog: &Catalog, branch: &str, name: &str, rows: &ResultSet) -> Result<(String, String), RuntimeError> {
    catalog.check_commit_permission(branch)?;
    let head = catalog.head(branch)?;
    let landed = land_output(catalog, &head, name, rows)?;
    let updates = BTreeMap::from([(name.to_string(), TableUpdate::Set(landed.snapshot_id.clone()))]);
    let (commit, _) = catalog.commit_tables(branch, &updates, &format!("import {name}"), &head)?;
    Ok((commit, landed.snapshot_id))
}

/// Fingerprint of an expectation result, same formula as table content.
fn result_fingerprint(result: &ResultSet) -> Result<String, TableError> {
    let bytes = encode_csv(&result.schema, &result.rows)?;
    Ok(canonical_hash(&[sha256_hex(&bytes)]))
}

/// Executes `plan`, commits the outputs and saves the manifest.
pub fn execute_run(
    catalog: &Catalog,
    plan: &RunPlan,
    code: &CodeSnapshot,
    opts: &RunOptions,
) -> Result<RunManifest, RuntimeError> {
    let started_at = catalog.now();
    let store = catalog.store();
    let code_blob_keys = store_code_blobs(store, code)?;
    let scratch = tempfile::Builder::new()
        .prefix(&format!("bpln-run-{}-", opts.run_id))
        .tempdir()
        .map_err(|source| RuntimeError::Io {
            path: std::env::temp_dir(),
            source,
        })?;
    let ctx = StepContext {
        work_dir: opts.work_dir.to_path_buf(),
        scratch_dir: scratch.path().to_path_buf(),
        run_id: opts.run_id,
    };
    let notify = |e: RunEvent| {
        if let Some(f) = opts.observer {
            f(&e);
        }
    };

    let mut tables: BTreeMap<String, ResultSet> = BTreeMap::new();
    for (name, id) in &plan.resolved_sources {
        let snap = load_snapshot(store, id)?;
        tables.insert(name.clone(), read_table(store, &snap)?);
    }

    let mut results: Vec<StepResult> = Vec::new();
    let mut status_of: BTreeMap<String, StepStatus> = BTreeMap::new();
    let mut updates = BTreeMap::new();
    let mut env = BTreeMap::new();
    for name in &plan.step_order {
        let step = &plan.graph.steps[name];
        if let Some(fp) = step.environment_fingerprint() {
            env.insert(name.clone(), fp.to_string());
        }
        let mut r = StepResult {
            step: name.clone(),
            kind: step.kind_name().to_string(),
            status: StepStatus::Skipped,
            deterministic: step.deterministic(),
            output_snapshot: None,
            output_content_fingerprint: None,
            error: None,
            duration_ms: 0,
            stdout: None,
            stderr: None,
        };
        let blocked: Vec<&str> = plan
            .graph
            .parents(name)
            .filter(|p| status_of.get(*p) != Some(&StepStatus::Succeeded))
            .collect();
        if !blocked.is_empty() {
            r.error = Some(format!("skipped: upstream step {} did not succeed", blocked.join(", ")));
        } else {
            let t0 = Instant::now();
            let inputs: BTreeMap<String, ResultSet> = step
                .inputs()
                .into_iter()
                .filter_map(|t| tables.get(&t).map(|rs| (t, rs.clone())))
                .collect();
            let outcome = execute_step(step, &inputs, &ctx).and_then(|out| {
                let landed = if step.is_expectation() {
                    None
                } else {
                    Some(land_output(catalog, &plan.input_commit, name, &out.result).map_err(|e| StepFailure::Storage(e.to_string()))?)
                };
                Ok((out, landed))
            });
            match outcome {
                Ok((out, landed)) => {
                    r.status = StepStatus::Succeeded;
                    match landed {
                        Some(l) => {
                            updates.insert(name.clone(), TableUpdate::Set(l.snapshot_id.clone()));
                            r.output_snapshot = Some(l.snapshot_id);
                            r.output_content_fingerprint = Some(l.fingerprint);
                        }
                        None => r.output_content_fingerprint = Some(result_fingerprint(&out.result)?),
                    }
                    r.stdout = out.stdout;
                    r.stderr = out.stderr;
                    tables.insert(name.clone(), out.result);
                }
                Err(e) => {
                    r.status = StepStatus::Failed;
                    r.error = Some(e.describe());
                }
            }
            r.duration_ms = t0.elapsed().as_millis() as u64;
        }
        status_of.insert(name.clone(), r.status);
        notify(RunEvent::StepFinished {
            step: name.clone(),
            status: r.status,
        });
        results.push(r);
    }

    let any_failed = results.iter().any(|r| r.status != StepStatus::Succeeded);
    let mut error = None;
    let mut output_commit = None;
    if any_failed && opts.all_or_nothing {
        error = Some("a step failed and --all-or-nothing is set; no outputs were committed".to_string());
    } else if !updates.is_empty() {
        let message = format!("run {}", opts.run_id);
        match catalog.commit_tables(&plan.target_ref, &updates, &message, &plan.target_head) {
            Ok((hash, _)) => {
                notify(RunEvent::Committed { commit: hash.clone() });
                output_commit = Some(hash);
            }
            Err(e) => error = Some(format!("{}: {e}", e.name())),
        }
    }
    let status = if !any_failed && error.is_none() {
        RunStatus::Succeeded
    } else {
        RunStatus::Failed
    };

    let manifest = RunManifest {
        run_id: opts.run_id,
        user: catalog.user().to_string(),
        code_hash: code.hash.clone(),
        code_blob_keys,
        input_commit: plan.input_commit.clone(),
        target_ref: plan.target_ref.clone(),
        output_commit,
        step_results: results,
        status,
        error,
        environment_fingerprints: env,
        host_descriptor: host_descriptor(),
        all_or_nothing: opts.all_or_nothing,
        replay_of: opts.replay_of,
        parameters: BTreeMap::new(),
        started_at,
        finished_at: catalog.now(),
    };
    save_manifest(store, &manifest)?;
    Ok(manifest)
}

/// Loads the project in `project_dir` and runs it against `target_ref`.
pub fn run_project(
    catalog: &Catalog,
    project_dir: &Path,
    target_ref: &str,
    all_or_nothing: bool,
    observer: Option<&(dyn Fn(&RunEvent) + Sync)>,
) -> Result<RunManifest, RuntimeError> {
    let code = code_snapshot_hash(project_dir)?;
    let graph = build_dag(load_project(project_dir)?)?;
    let plan = plan_run(catalog, graph, target_ref)?;
    let run_id = allocate_run_id(catalog.store())?;
    execute_run(catalog, &plan, &code, &RunOptions {
        run_id,
        work_dir: project_dir,
        all_or_nothing,
        replay_of: None,
        observer,
    })
}

/// Re-executes run `run_id` from its stored code and pinned input commit,
/// landing outputs on `target_ref` (which must differ from the original
/// run's branch).
pub fn replay_run(
    catalog: &Catalog,
    run_id: u64,
    target_ref: &str,
    all_or_nothing: bool,
) -> Result<(RunManifest, Vec<StepVerdict>), RuntimeError> {
    let code_dir = tempfile::Builder::new()
        .prefix(&format!("bpln-replay-{run_id}-"))
        .tempdir()
        .map_err(|source| RuntimeError::Io {
            path: std::env::temp_dir(),
            source,
        })?;
    let source = resolve_replay(catalog.store(), run_id, code_dir.path())?;
    if source.manifest.target_ref == target_ref {
        return Err(RuntimeError::ReplayOntoOriginal(target_ref.to_string()));
    }
    let graph = build_dag(load_project(&source.code_dir)?)?;
    let plan = plan_run_at(catalog, graph, target_ref, &source.manifest.input_commit)?;
    let new_id = allocate_run_id(catalog.store())?;
    let manifest = execute_run(catalog, &plan, &source.code, &RunOptions {
        run_id: new_id,
        work_dir: &source.code_dir,
        all_or_nothing,
        replay_of: Some(run_id),
        observer: None,
    })?;
    let verdicts = compare_runs(&source.manifest, &manifest);
    for v in &verdicts {
        if let Some(w) = &v.warning {
            log::warn!("step {}: {w}", v.step);
        }
    }
    Ok((manifest, verdicts))
}

/// Outcome of one expectation evaluated against a ref.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub step: String,
    pub passed: bool,
    pub message: Option<String>,
}

/// Evaluates every expectation step of the project in `project_dir` over
/// the tables at `rev`.
pub fn run_checks(catalog: &Catalog, project_dir: &Path, rev: &str) -> Result<Vec<CheckResult>, RuntimeError> {
    let steps = load_project(project_dir)?;
    let tables_at = catalog.tables_at(rev)?;
    let scratch = tempfile::tempdir().map_err(|source| RuntimeError::Io {
        path: std::env::temp_dir(),
        source,
    })?;
    let ctx = StepContext {
        work_dir: project_dir.to_path_buf(),
        scratch_dir: scratch.path().to_path_buf(),
        run_id: 0,
    };
    let mut out = Vec::new();
    for step in steps.iter().filter(|s| s.is_expectation()) {
        let mut inputs = BTreeMap::new();
        let mut missing = BTreeSet::new();
        for t in step.inputs() {
            match tables_at.get(&t) {
                Some(id) => {
                    let snap = load_snapshot(catalog.store(), id)?;
                    inputs.insert(t, read_table(catalog.store(), &snap)?);
                }
                None => {
                    missing.insert(t);
                }
            }
        }
        let result = if missing.is_empty() {
            execute_step(step, &inputs, &ctx).map(|_| ()).map_err(|e| e.describe())
        } else {
            Err(format!("tables not found at {rev}: {missing:?}"))
        };
        out.push(CheckResult {
            step: step.name.clone(),
            passed: result.is_ok(),
            message: result.err(),
        });
    }
    Ok(out)
}

/// Merges `source` into `target` only if every expectation of the project
/// passes on the source head.
pub fn merge_with_checks(
    catalog: &Catalog,
    project_dir: &Path,
    source: &str,
    target: &str,
) -> Result<(Vec<CheckResult>, MergeOutcome), RuntimeError> {
    let head = catalog.head(source)?;
    let checks = run_checks(catalog, project_dir, &head)?;
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} ({})", c.step, c.message.as_deref().unwrap_or("failed")))
        .collect();
    if !failed.is_empty() {
        return Err(RuntimeError::ChecksFailed(failed));
    }
    let now = catalog.head(source)?;
    if now != head {
        return Err(CatalogError::ConcurrentUpdate {
            branch: source.to_string(),
            expected: head,
            actual: now,
        }
        .into());
    }
    let outcome = catalog.merge(source, target)?;
    Ok((checks, outcome))
}
