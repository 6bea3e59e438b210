//! The `bauplan` command line. [`dispatch`] runs one command in-process and
//! returns its exit code and output, so tests can drive the CLI without
//! spawning the binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bpln_core::canonical::{to_canonical_json, utc_from_epoch};
use bpln_core::catalog::{branch_owner, is_valid_ref_name, Catalog, CatalogError, MergeOutcome, MAIN};
use bpln_core::object_store::ObjectStore;
use bpln_core::run_store::{list_runs, load_manifest, RunStatus};
use bpln_core::runtime::{import_table, merge_with_checks, replay_run, run_project};
use bpln_core::sql::{extract_table_refs, parse_sql, execute_query};
use bpln_core::table::{decode_csv, encode_csv, load_snapshot, read_table, ResultSet, Schema};
use bpln_core::{Error, ErrorClass};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

const WORKSPACE_FILE: &str = ".bauplan/workspace.json";

#[derive(Debug, Parser)]
#[command(name = "bauplan", version, about = "Git-like data pipelines over a local lakehouse")]
struct Cli {
    /// Warehouse directory (overrides BAUPLAN_WAREHOUSE and the workspace file).
    #[arg(long, global = true)]
    warehouse: Option<PathBuf>,
    /// Acting user (overrides BAUPLAN_USER and the workspace file).
    #[arg(long, global = true)]
    user: Option<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Create a warehouse (or attach to an existing one) and a workspace here.
    Init,
    /// Create a branch, or list branches when no name is given.
    Branch {
        name: Option<String>,
        #[arg(long)]
        from: Option<String>,
    },
    /// Switch to a branch, creating `<user>.<name>` branches on demand.
    Checkout { reference: String },
    /// First-parent history of a ref.
    Log { reference: Option<String> },
    /// Table-level changes between two refs or commits.
    Diff { a: String, b: String },
    /// Merge a branch into another (default main).
    Merge {
        source: String,
        #[arg(long)]
        into: Option<String>,
        /// Re-run the project's expectations on the source head first.
        #[arg(long)]
        require_checks: bool,
        #[arg(long)]
        project: Option<PathBuf>,
    },
    /// Run the project on the current branch, or replay a past run by id.
    Run {
        #[arg(long)]
        id: Option<u64>,
        #[arg(long)]
        project: Option<PathBuf>,
        #[arg(long)]
        all_or_nothing: bool,
        #[arg(long)]
        json: bool,
    },
    /// Execute a SQL query against the current branch or `--ref`.
    Query {
        sql: String,
        #[arg(long = "ref")]
        reference: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// List stored runs.
    Runs {
        #[arg(long)]
        json: bool,
    },
    /// Load a CSV file as a table on the current branch.
    Import {
        table: String,
        csv: PathBuf,
        /// JSON file holding `{"columns":[{"name","type","nullable"},...]}`.
        #[arg(long)]
        schema: PathBuf,
    },
}

/// Process environment seen by a command.
#[derive(Debug, Clone, Default)]
pub struct Context {
    pub cwd: PathBuf,
    pub env: BTreeMap<String, String>,
}

impl Context {
    pub fn from_process() -> Self {
        Self {
            cwd: std::env::current_dir().unwrap_or_else(|_| PathBuf::from(".")),
            env: std::env::vars().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct Workspace {
    current_branch: String,
    user: String,
    warehouse_root: PathBuf,
}

/// A failure with its stable name and exit class.
#[derive(Debug)]
struct Failure {
    name: &'static str,
    class: ErrorClass,
    message: String,
}

impl Failure {
    fn user(name: &'static str, message: impl Into<String>) -> Self {
        Self {
            name,
            class: ErrorClass::User,
            message: message.into(),
        }
    }

    fn system(name: &'static str, message: impl Into<String>) -> Self {
        Self {
            name,
            class: ErrorClass::System,
            message: message.into(),
        }
    }
}

impl<E: Into<Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e = e.into();
        Self {
            name: e.name(),
            class: e.class(),
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<i32, Failure>;

struct Session<'a> {
    ctx: &'a Context,
    out: String,
    err: String,
    flag_warehouse: Option<PathBuf>,
    flag_user: Option<String>,
}

/// Runs one command. `args` excludes the program name.
pub fn dispatch<I, S>(args: I, ctx: &Context) -> Outcome
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = std::iter::once("bauplan".to_string()).chain(args.into_iter().map(Into::into)).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            let code = if e.use_stderr() { 1 } else { 0 };
            return if e.use_stderr() {
                Outcome {
                    code,
                    stdout: String::new(),
                    stderr: text,
                }
            } else {
                Outcome {
                    code,
                    stdout: text,
                    stderr: String::new(),
                }
            };
        }
    };
    let mut s = Session {
        ctx,
        out: String::new(),
        err: String::new(),
        flag_warehouse: cli.warehouse.clone(),
        flag_user: cli.user.clone(),
    };
    let code = match s.execute(cli.command) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(s.err, "error[{}]: {}", f.name, f.message);
            match f.class {
                ErrorClass::User => 1,
                ErrorClass::System => 2,
            }
        }
    };
    Outcome {
        code,
        stdout: s.out,
        stderr: s.err,
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

fn is_valid_user(u: &str) -> bool {
    !u.is_empty() && u.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl Session<'_> {
    fn abs(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.ctx.cwd.join(p)
        }
    }

    fn workspace_path(&self) -> PathBuf {
        self.ctx.cwd.join(WORKSPACE_FILE)
    }

    fn read_workspace_file(&self) -> Result<Option<Workspace>, Failure> {
        let path = self.workspace_path();
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| Failure::user("ConfigError", format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Failure::system("IoFailure", format!("{}: {e}", path.display()))),
        }
    }

    fn write_workspace(&self, ws: &Workspace) -> Result<(), Failure> {
        let path = self.workspace_path();
        let io = |e: std::io::Error| Failure::system("IoFailure", format!("{}: {e}", path.display()));
        fs::create_dir_all(path.parent().unwrap()).map_err(io)?;
        fs::write(&path, to_canonical_json(ws)).map_err(io)
    }

    /// Effective workspace: flags, then environment, then the file.
    fn workspace(&self) -> Result<Workspace, Failure> {
        let file = self.read_workspace_file()?;
        let warehouse = self
            .flag_warehouse
            .as_ref()
            .map(|p| self.abs(p))
            .or_else(|| self.ctx.env.get("BAUPLAN_WAREHOUSE").map(|p| self.abs(Path::new(p))))
            .or_else(|| file.as_ref().map(|w| w.warehouse_root.clone()))
            .ok_or_else(|| {
                Failure::user(
                    "NoWorkspace",
                    "no warehouse configured; run `bauplan init --warehouse <dir> --user <name>` or set BAUPLAN_WAREHOUSE",
                )
            })?;
        let user = self
            .flag_user
            .clone()
            .or_else(|| self.ctx.env.get("BAUPLAN_USER").cloned())
            .or_else(|| file.as_ref().map(|w| w.user.clone()))
            .ok_or_else(|| Failure::user("NoWorkspace", "no user configured; pass --user or set BAUPLAN_USER"))?;
        if !is_valid_user(&user) {
            return Err(Failure::user("ConfigError", format!("user {user:?} must match [a-z0-9_]+")));
        }
        let current_branch = file.map(|w| w.current_branch).unwrap_or_else(|| MAIN.to_string());
        Ok(Workspace {
            current_branch,
            user,
            warehouse_root: warehouse,
        })
    }

    /// Catalog for `ws`. `SOURCE_DATE_EPOCH` pins every timestamp written.
    fn catalog(&self, ws: &Workspace) -> Result<Catalog, Failure> {
        let catalog = Catalog::new(ObjectStore::open(&ws.warehouse_root)?, ws.user.clone());
        let Some(raw) = self.ctx.env.get("SOURCE_DATE_EPOCH") else {
            return Ok(catalog);
        };
        let at = raw
            .trim()
            .parse::<i64>()
            .ok()
            .and_then(utc_from_epoch)
            .ok_or_else(|| Failure::user("ConfigError", format!("SOURCE_DATE_EPOCH={raw:?} is not a Unix timestamp")))?;
        Ok(catalog.with_clock(move || at.clone()))
    }

    fn open(&self) -> Result<(Workspace, Catalog), Failure> {
        let ws = self.workspace()?;
        if !ws.warehouse_root.is_dir() {
            return Err(Failure::user(
                "NoWorkspace",
                format!("warehouse {} does not exist; run `bauplan init`", ws.warehouse_root.display()),
            ));
        }
        let catalog = self.catalog(&ws)?;
        if !catalog.is_initialized() {
            return Err(Failure::user(
                "NoWorkspace",
                format!("warehouse {} is not initialized; run `bauplan init`", ws.warehouse_root.display()),
            ));
        }
        Ok((ws, catalog))
    }

    fn execute(&mut self, cmd: Cmd) -> CmdResult {
        match cmd {
            Cmd::Init => self.init(),
            Cmd::Branch { name, from } => self.branch(name, from),
            Cmd::Checkout { reference } => self.checkout(&reference),
            Cmd::Log { reference } => self.log(reference),
            Cmd::Diff { a, b } => self.diff(&a, &b),
            Cmd::Merge {
                source,
                into,
                require_checks,
                project,
            } => self.merge(&source, into, require_checks, project),
            Cmd::Run {
                id,
                project,
                all_or_nothing,
                json,
            } => self.run(id, project, all_or_nothing, json),
            Cmd::Query { sql, reference, json } => self.query(&sql, reference, json),
            Cmd::Runs { json } => self.runs(json),
            Cmd::Import { table, csv, schema } => self.import(&table, &csv, &schema),
        }
    }

    fn init(&mut self) -> CmdResult {
        let mut ws = self.workspace()?;
        fs::create_dir_all(&ws.warehouse_root)
            .map_err(|e| Failure::system("IoFailure", format!("{}: {e}", ws.warehouse_root.display())))?;
        ws.warehouse_root = ws.warehouse_root.canonicalize().unwrap_or(ws.warehouse_root);
        let catalog = self.catalog(&ws)?;
        if catalog.is_initialized() {
            let _ = writeln!(self.out, "attached to existing warehouse {}", ws.warehouse_root.display());
        } else {
            let main = catalog.init()?;
            let _ = writeln!(self.out, "initialized warehouse {} (main at {})", ws.warehouse_root.display(), short(&main.head));
        }
        ws.current_branch = MAIN.to_string();
        self.write_workspace(&ws)?;
        Ok(0)
    }

    fn branch(&mut self, name: Option<String>, from: Option<String>) -> CmdResult {
        let (ws, catalog) = self.open()?;
        let Some(name) = name else {
            for r in catalog.list_branches()? {
                let mark = if r.name == ws.current_branch { "*" } else { " " };
                let _ = writeln!(self.out, "{mark} {} {}", r.name, short(&r.head));
            }
            return Ok(0);
        };
        let from = from.unwrap_or(ws.current_branch);
        let r = catalog.create_branch(&name, &from)?;
        let _ = writeln!(self.out, "created branch {} at {}", r.name, short(&r.head));
        Ok(0)
    }

    fn checkout(&mut self, reference: &str) -> CmdResult {
        let (mut ws, catalog) = self.open()?;
        if !catalog.branch_exists(reference).unwrap_or(false) {
            let ours = is_valid_ref_name(reference) && branch_owner(reference) == Some(ws.user.as_str());
            if !ours {
                return Err(CatalogError::RefNotFound(reference.to_string()).into());
            }
            let r = catalog.create_branch(reference, &ws.current_branch)?;
            let _ = writeln!(self.out, "created branch {} from {} at {}", r.name, ws.current_branch, short(&r.head));
        }
        ws.current_branch = reference.to_string();
        self.write_workspace(&ws)?;
        let _ = writeln!(self.out, "switched to {reference}");
        Ok(0)
    }

    fn log(&mut self, reference: Option<String>) -> CmdResult {
        let (ws, catalog) = self.open()?;
        let rev = reference.unwrap_or(ws.current_branch);
        for (hash, c) in catalog.log(&rev)? {
            let merge = if c.parents.len() > 1 { " (merge)" } else { "" };
            let _ = writeln!(self.out, "{hash} {} {} {}{merge}", c.created_at, c.author, c.message);
        }
        Ok(0)
    }

    fn diff(&mut self, a: &str, b: &str) -> CmdResult {
        let (_, catalog) = self.open()?;
        for d in catalog.diff(a, b)? {
            let _ = writeln!(
                self.out,
                "{} {} {} -> {}",
                d.change,
                d.table_name,
                d.from_snapshot.as_deref().map_or("-", short),
                d.to_snapshot.as_deref().map_or("-", short)
            );
        }
        Ok(0)
    }

    fn merge(&mut self, source: &str, into: Option<String>, require_checks: bool, project: Option<PathBuf>) -> CmdResult {
        let (_, catalog) = self.open()?;
        let target = into.unwrap_or_else(|| MAIN.to_string());
        let outcome = if require_checks {
            let dir = self.abs(project.as_deref().unwrap_or(Path::new(".")));
            let (checks, outcome) = merge_with_checks(&catalog, &dir, source, &target)?;
            if checks.is_empty() {
                let _ = writeln!(self.err, "warning: project has no expectation steps");
            }
            for c in &checks {
                let _ = writeln!(self.out, "check {} passed", c.step);
            }
            outcome
        } else {
            catalog.merge(source, &target)?
        };
        let _ = match &outcome {
            MergeOutcome::UpToDate { head } => writeln!(self.out, "{target} already up to date at {}", short(head)),
            MergeOutcome::FastForward { head } => writeln!(self.out, "fast-forwarded {target} to {}", short(head)),
            MergeOutcome::Merged { head, .. } => writeln!(self.out, "merged {source} into {target} as {}", short(head)),
        };
        Ok(0)
    }

    fn run(&mut self, id: Option<u64>, project: Option<PathBuf>, all_or_nothing: bool, json: bool) -> CmdResult {
        let (ws, catalog) = self.open()?;
        let (manifest, verdicts) = match id {
            Some(run_id) => {
                let (m, v) = replay_run(&catalog, run_id, &ws.current_branch, all_or_nothing)?;
                (m, Some(v))
            }
            None => {
                let dir = self.abs(project.as_deref().unwrap_or(Path::new(".")));
                (run_project(&catalog, &dir, &ws.current_branch, all_or_nothing, None)?, None)
            }
        };
        if json {
            let body = match &verdicts {
                Some(v) => serde_json::json!({ "manifest": manifest, "verdicts": v }),
                None => serde_json::to_value(&manifest).expect("manifest serializes"),
            };
            self.out.push_str(&String::from_utf8(to_canonical_json(&body)).expect("json is utf-8"));
            self.out.push('\n');
        } else {
            let status = match manifest.status {
                RunStatus::Succeeded => "succeeded",
                RunStatus::Failed => "failed",
            };
            let _ = writeln!(self.out, "run {} {status} on {}", manifest.run_id, manifest.target_ref);
            if let Some(of) = manifest.replay_of {
                let _ = writeln!(self.out, "replay of run {of} from input commit {}", short(&manifest.input_commit));
            }
            for r in &manifest.step_results {
                let status = serde_json::to_value(r.status).expect("status serializes");
                let _ = write!(self.out, "  {} {} {}", r.step, r.kind, status.as_str().unwrap_or("?"));
                if let Some(e) = &r.error {
                    let _ = write!(self.out, ": {e}");
                }
                self.out.push('\n');
            }
            if let Some(c) = &manifest.output_commit {
                let _ = writeln!(self.out, "output commit {c}");
            }
            if let Some(e) = &manifest.error {
                let _ = writeln!(self.err, "{e}");
            }
            for v in verdicts.iter().flatten() {
                let _ = writeln!(self.out, "  {} {}", v.verdict, v.step);
                if let Some(w) = &v.warning {
                    let _ = writeln!(self.err, "warning: step {}: {w}", v.step);
                }
            }
        }
        Ok(if manifest.status == RunStatus::Succeeded { 0 } else { 1 })
    }

    fn query(&mut self, sql: &str, reference: Option<String>, json: bool) -> CmdResult {
        let (ws, catalog) = self.open()?;
        let rev = reference.unwrap_or(ws.current_branch);
        let query = parse_sql(sql)?;
        let commit = catalog.resolve(&rev)?;
        let at = catalog.tables_at(&commit)?;
        let mut tables: BTreeMap<String, ResultSet> = BTreeMap::new();
        for name in extract_table_refs(&query) {
            let id = at.get(&name).ok_or_else(|| CatalogError::TableNotFound {
                table: name.clone(),
                at: rev.clone(),
            })?;
            let snap = load_snapshot(catalog.store(), id)?;
            tables.insert(name, read_table(catalog.store(), &snap)?);
        }
        let result = execute_query(&query, &tables)?;
        if json {
            let body = serde_json::json!({ "schema": result.schema.columns(), "rows": result.rows });
            self.out.push_str(&String::from_utf8(to_canonical_json(&body)).expect("json is utf-8"));
            self.out.push('\n');
        } else if result.schema.len() == 1 && result.rows.len() == 1 {
            let _ = writeln!(self.out, "{}", result.rows[0][0]);
        } else {
            let csv = encode_csv(&result.schema, &result.rows)?;
            self.out.push_str(&String::from_utf8_lossy(&csv));
        }
        Ok(0)
    }

    fn runs(&mut self, json: bool) -> CmdResult {
        let (_, catalog) = self.open()?;
        let mut manifests = Vec::new();
        for id in list_runs(catalog.store())? {
            manifests.push(load_manifest(catalog.store(), id)?);
        }
        if json {
            self.out.push_str(&String::from_utf8(to_canonical_json(&manifests)).expect("json is utf-8"));
            self.out.push('\n');
            return Ok(0);
        }
        for m in manifests {
            let status = match m.status {
                RunStatus::Succeeded => "succeeded",
                RunStatus::Failed => "failed",
            };
            let replay = m.replay_of.map(|r| format!(" replay-of={r}")).unwrap_or_default();
            let _ = writeln!(
                self.out,
                "{} {status} {} input={} output={} code={}{replay}",
                m.run_id,
                m.target_ref,
                short(&m.input_commit),
                m.output_commit.as_deref().map_or("-", short),
                short(&m.code_hash)
            );
        }
        Ok(0)
    }

    fn import(&mut self, table: &str, csv: &Path, schema: &Path) -> CmdResult {
        let (ws, catalog) = self.open()?;
        let read = |p: &Path| {
            let p = self.abs(p);
            fs::read(&p).map_err(|e| Failure::user("IoFailure", format!("{}: {e}", p.display())))
        };
        let schema: Schema = serde_json::from_slice(&read(schema)?)
            .map_err(|e| Failure::user("InvalidSchema", format!("{}: {e}", schema.display())))?;
        let rows = decode_csv(&schema, &read(csv)?)?;
        let rs = ResultSet::new(schema, rows);
        let n = rs.rows.len();
        let (commit, snapshot) = import_table(&catalog, &ws.current_branch, table, &rs)?;
        let _ = writeln!(
            self.out,
            "imported {n} rows into {table} on {} (snapshot {}, commit {})",
            ws.current_branch,
            short(&snapshot),
            short(&commit)
        );
        Ok(0)
    }
}
