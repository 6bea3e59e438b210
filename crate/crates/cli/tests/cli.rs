use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bpln_cli::{dispatch, Context, Outcome};
use bpln_core::canonical::to_canonical_json;
use bpln_core::catalog::{Catalog, MAIN};
use bpln_core::object_store::ObjectStore;
use bpln_core::run_store::RunManifest;
use bpln_core::runtime::{import_table, replay_run, run_project};
use bpln_core::sql::run_sql;
use bpln_core::table::{encode_csv, read_table, Column, ColumnType, ResultSet, Schema, Value};
use tempfile::TempDir;

const EPOCH: &str = "1704067200";
const EPOCH_TEXT: &str = "2024-01-01T00:00:00Z";

struct Sandbox {
    root: TempDir,
    env: BTreeMap<String, String>,
}

impl Sandbox {
    fn new() -> Self {
        let root = TempDir::new().unwrap();
        fs::create_dir_all(root.path().join("project")).unwrap();
        Sandbox {
            root,
            env: BTreeMap::new(),
        }
    }

    fn project(&self) -> PathBuf {
        self.root.path().join("project")
    }

    fn warehouse(&self) -> PathBuf {
        self.root.path().join("warehouse")
    }

    fn run(&self, args: &[&str]) -> Outcome {
        let ctx = Context {
            cwd: self.project(),
            env: self.env.clone(),
        };
        dispatch(args.iter().copied(), &ctx)
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert_eq!(out.code, 0, "{args:?}: {}", out.stderr);
        out.stdout
    }

    fn init(&self, user: &str) {
        let wh = self.warehouse().display().to_string();
        self.ok(&["--warehouse", &wh, "--user", user, "init"]);
    }

    fn import(&self, table: &str, rs: &ResultSet) -> Outcome {
        let csv = self.root.path().join(format!("{table}.csv"));
        let schema = self.root.path().join(format!("{table}.schema.json"));
        fs::write(&csv, encode_csv(&rs.schema, &rs.rows).unwrap()).unwrap();
        fs::write(&schema, serde_json::to_vec(&rs.schema).unwrap()).unwrap();
        self.run(&["import", table, csv.to_str().unwrap(), "--schema", schema.to_str().unwrap()])
    }

    fn catalog(&self, user: &str) -> Catalog {
        Catalog::new(ObjectStore::open(self.warehouse()).unwrap(), user)
    }
}

fn sample(n: i64) -> ResultSet {
    let schema = Schema::new(vec![
        Column::new("c1", ColumnType::Int64, false),
        Column::new("c2", ColumnType::String, true),
        Column::new("c3", ColumnType::Float64, true),
    ])
    .unwrap();
    let rows = (0..n)
        .map(|i| {
            vec![
                Value::Int(i),
                if i % 3 == 0 { Value::Null } else { Value::Str(format!("k\"{}, x", i % 4)) },
                Value::Float(i as f64 / 3.0),
            ]
        })
        .collect();
    ResultSet::new(schema, rows)
}

fn project(dir: &Path) {
    fs::write(dir.join("big.sql"), "SELECT c1, c2, c3 FROM src WHERE c1 >= 3\n").unwrap();
    fs::write(dir.join("by_key.sql"), "SELECT c2, COUNT(*) AS n, AVG(c3) AS mean FROM big GROUP BY c2\n").unwrap();
    fs::write(
        dir.join("copy.step.json"),
        r#"{"command":["sh","-c","cp \"$BPLN_INPUT_BY_KEY\" \"$BPLN_OUTPUT\""],"inputs":["by_key"],"output_schema":{"columns":[{"name":"c2","type":"string","nullable":true},{"name":"n","type":"int64","nullable":false},{"name":"mean","type":"float64","nullable":true}]},"environment_fingerprint":"posix-sh","deterministic":true}"#,
    )
    .unwrap();
}

/// Files under `root`, skipping the store's scratch directories.
fn snapshot_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn go(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().to_string();
            if rel.starts_with(".tmp") || rel.starts_with(".locks") {
                continue;
            }
            if p.is_dir() {
                go(&p, root, out);
            } else {
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    go(root, root, &mut out);
    out
}

#[test]
fn checkout_of_a_missing_foreign_branch_is_ref_not_found() {
    let sb = Sandbox::new();
    sb.init("richard");
    let out = sb.run(&["checkout", "missing.branch"]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.starts_with("error[RefNotFound]"), "{}", out.stderr);
    let out = sb.run(&["log", "richard.nope"]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.starts_with("error[RefNotFound]"));
}

#[test]
fn commands_need_a_workspace() {
    let sb = Sandbox::new();
    let out = sb.run(&["log"]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.starts_with("error[NoWorkspace]"), "{}", out.stderr);
    let out = sb.run(&["--warehouse", "wh", "--user", "Richard", "init"]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.starts_with("error[ConfigError]"));
    let out = sb.run(&["frobnicate"]);
    assert_eq!(out.code, 1);
}

#[test]
fn init_attaches_and_checkout_tracks_the_branch() {
    let sb = Sandbox::new();
    sb.init("richard");
    assert!(sb.ok(&["--user", "anna", "init"]).starts_with("attached"));
    let ws: serde_json::Value = serde_json::from_slice(&fs::read(sb.project().join(".bauplan/workspace.json")).unwrap()).unwrap();
    assert_eq!(ws["user"], "anna");
    assert_eq!(ws["current_branch"], "main");
    sb.ok(&["checkout", "anna.dev"]);
    assert!(sb.ok(&["branch"]).contains("* anna.dev"));
    sb.ok(&["checkout", MAIN]);
    assert!(sb.ok(&["branch"]).contains("* main"));
}

#[test]
fn precedence_is_flags_then_env_then_file() {
    let mut sb = Sandbox::new();
    sb.init("richard");
    sb.env.insert("BAUPLAN_USER".into(), "anna".into());
    // env beats the file
    assert_eq!(sb.run(&["branch", "richard.a"]).code, 1);
    sb.ok(&["branch", "anna.a"]);
    // flag beats env
    sb.ok(&["--user", "richard", "branch", "richard.a"]);
    // a bad env warehouse is used in preference to the file
    sb.env.insert("BAUPLAN_WAREHOUSE".into(), sb.root.path().join("nowhere").display().to_string());
    let out = sb.run(&["branch"]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.starts_with("error[NoWorkspace]"));
    let wh = sb.warehouse().display().to_string();
    assert!(sb.ok(&["--warehouse", &wh, "branch"]).contains("anna.a"));
}

#[test]
fn writes_to_foreign_branches_fail_before_touching_the_store() {
    let sb = Sandbox::new();
    sb.init("anna");
    sb.ok(&["checkout", "anna.dev"]);
    assert_eq!(sb.import("src", &sample(5)).code, 0);
    project(&sb.project());
    sb.ok(&["--user", "richard", "init"]);
    sb.ok(&["checkout", "anna.dev"]);
    sb.ok(&["checkout", "richard.mine"]);
    sb.ok(&["checkout", "anna.dev"]);

    let before = snapshot_tree(&sb.warehouse());
    for args in [
        vec!["run"],
        vec!["branch", "anna.other"],
        vec!["merge", "richard.mine", "--into", "anna.dev"],
    ] {
        let out = sb.run(&args);
        assert_eq!(out.code, 1, "{args:?}");
        assert!(out.stderr.starts_with("error[WritePermissionDenied]"), "{args:?}: {}", out.stderr);
    }
    let out = sb.import("src", &sample(6));
    assert_eq!(out.code, 1);
    assert!(out.stderr.starts_with("error[WritePermissionDenied]"));
    assert_eq!(snapshot_tree(&sb.warehouse()), before);
}

#[test]
fn json_outputs_round_trip() {
    let sb = Sandbox::new();
    sb.init("richard");
    sb.ok(&["checkout", "richard.dev"]);
    assert_eq!(sb.import("src", &sample(12)).code, 0);
    project(&sb.project());

    let first: RunManifest = serde_json::from_str(&sb.ok(&["run", "--json"])).unwrap();
    let second: RunManifest = serde_json::from_str(&sb.ok(&["run", "--json"])).unwrap();
    let fps = |m: &RunManifest| m.step_results.iter().map(|r| r.output_content_fingerprint.clone()).collect::<Vec<_>>();
    assert_eq!(fps(&first), fps(&second));
    assert!(fps(&first).iter().all(Option::is_some));

    let listed = sb.ok(&["runs", "--json"]);
    let runs: Vec<RunManifest> = serde_json::from_str(&listed).unwrap();
    assert_eq!(runs, vec![first.clone(), second]);
    assert_eq!(String::from_utf8(to_canonical_json(&runs)).unwrap() + "\n", listed);

    let sql = "SELECT c2, n, mean FROM copy ORDER BY n DESC";
    let text = sb.ok(&["query", sql, "--json"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(String::from_utf8(to_canonical_json(&v)).unwrap() + "\n", text);
    let cat = sb.catalog("richard");
    let copy = read_table(cat.store(), &cat.resolve_table("richard.dev", "copy").unwrap()).unwrap();
    let expected = run_sql(sql, &BTreeMap::from([("copy".to_string(), copy)])).unwrap();
    assert_eq!(v["rows"], serde_json::to_value(&expected.rows).unwrap());
    assert_eq!(v["schema"], serde_json::to_value(expected.schema.columns()).unwrap());

    let out = sb.run(&["run", "--id", "1"]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.starts_with("error[ReplayOntoOriginal]"));
    sb.ok(&["checkout", "richard.replay"]);
    let replay: serde_json::Value = serde_json::from_str(&sb.ok(&["run", "--id", "1", "--json"])).unwrap();
    let manifest: RunManifest = serde_json::from_value(replay["manifest"].clone()).unwrap();
    assert_eq!(manifest.replay_of, Some(first.run_id));
    let verdicts = replay["verdicts"].as_array().unwrap();
    assert_eq!(verdicts.len(), 3);
    assert!(verdicts.iter().all(|v| v["verdict"] == "MATCH"));
}

#[test]
fn query_prints_scalars_bare_and_tables_as_csv() {
    let sb = Sandbox::new();
    sb.init("richard");
    sb.ok(&["checkout", "richard.dev"]);
    assert_eq!(sb.import("src", &sample(4)).code, 0);
    assert_eq!(sb.ok(&["query", "SELECT COUNT(*) FROM src"]), "4\n");
    assert_eq!(
        sb.ok(&["query", "SELECT c1, c2 FROM src WHERE c1 < 3"]),
        "c1,c2\n0,\n1,\"k\"\"1, x\"\n2,\"k\"\"2, x\"\n"
    );
    let old = sb.catalog("richard").head("richard.dev").unwrap();
    assert_eq!(sb.import("src", &sample(2)).code, 0);
    assert_eq!(sb.ok(&["query", "SELECT COUNT(*) FROM src", "--ref", &old]), "4\n");
    let out = sb.run(&["query", "SELECT FROM src"]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.starts_with("error[ParseError]"));
}

#[test]
fn cli_and_library_leave_identical_stores() {
    let mut cli = Sandbox::new();
    cli.env.insert("SOURCE_DATE_EPOCH".into(), EPOCH.into());
    cli.init("richard");
    cli.ok(&["checkout", "richard.dev"]);
    assert_eq!(cli.import("src", &sample(20)).code, 0);
    project(&cli.project());
    cli.ok(&["run"]);
    cli.ok(&["checkout", "richard.debug"]);
    cli.ok(&["run", "--id", "1"]);
    cli.ok(&["merge", "richard.dev"]);

    let lib = Sandbox::new();
    let cat = lib.catalog("richard").with_clock(|| EPOCH_TEXT.to_string());
    cat.init().unwrap();
    cat.create_branch("richard.dev", MAIN).unwrap();
    import_table(&cat, "richard.dev", "src", &sample(20)).unwrap();
    project(&lib.project());
    run_project(&cat, &lib.project(), "richard.dev", false, None).unwrap();
    cat.create_branch("richard.debug", "richard.dev").unwrap();
    replay_run(&cat, 1, "richard.debug", false).unwrap();
    cat.merge("richard.dev", MAIN).unwrap();

    let (a, b) = (snapshot_tree(&cli.warehouse()), snapshot_tree(&lib.warehouse()));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (key, bytes) in &a {
        if key.starts_with("runstore/manifests/") {
            // Step durations are wall-clock measurements.
            let strip = |raw: &[u8]| {
                let mut m: serde_json::Value = serde_json::from_slice(raw).unwrap();
                for r in m["step_results"].as_array_mut().unwrap() {
                    r["duration_ms"] = serde_json::Value::Null;
                }
                m
            };
            assert_eq!(strip(bytes), strip(&b[key]), "{key}");
        } else {
            assert_eq!(String::from_utf8_lossy(bytes), String::from_utf8_lossy(&b[key]), "{key}");
        }
    }
}
