//! Randomized two-branch histories checked against a brute-force three-way
//! merge computed straight from the stored commit objects.

use std::collections::{BTreeMap, BTreeSet};

use bpln_core::catalog::{Catalog, CatalogError, MergeOutcome, TableUpdate, MAIN};
use bpln_core::object_store::{ObjectKey, ObjectStore};
use bpln_core::table::{uuid_from_seed, write_table, Column, ColumnType, ResultSet, Schema, Value};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use tempfile::TempDir;

const TABLES: [&str; 5] = ["t0", "t1", "t2", "t3", "t4"];

#[derive(Debug, PartialEq)]
pub enum Expected {
    UpToDate,
    FastForward,
    Merged(BTreeMap<String, String>),
    Conflict(Vec<String>),
    Ambiguous,
}

/// Parents and table map of a commit, read from its raw JSON.
fn raw(store: &ObjectStore, hash: &str) -> (Vec<String>, BTreeMap<String, String>) {
    let v: serde_json::Value = serde_json::from_slice(&store.get_object(&ObjectKey::for_hash(hash)).unwrap()).unwrap();
    let parents = v["parents"].as_array().unwrap().iter().map(|p| p.as_str().unwrap().to_string()).collect();
    let tables = v["tables"]
        .as_object()
        .unwrap()
        .iter()
        .map(|(k, s)| (k.clone(), s.as_str().unwrap().to_string()))
        .collect();
    (parents, tables)
}

fn ancestors(store: &ObjectStore, start: &str) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut todo = vec![start.to_string()];
    while let Some(h) = todo.pop() {
        if seen.insert(h.clone()) {
            todo.extend(raw(store, &h).0);
        }
    }
    seen
}

pub fn oracle(store: &ObjectStore, source: &str, target: &str) -> Expected {
    let (anc_s, anc_t) = (ancestors(store, source), ancestors(store, target));
    if anc_t.contains(source) {
        return Expected::UpToDate;
    }
    if anc_s.contains(target) {
        return Expected::FastForward;
    }
    let common: Vec<&String> = anc_s.intersection(&anc_t).collect();
    // A common ancestor is lowest if no other common ancestor descends from it.
    let lowest: Vec<&&String> = common
        .iter()
        .filter(|c| !common.iter().any(|d| d != *c && ancestors(store, d).contains(**c)))
        .collect();
    if lowest.len() != 1 {
        return Expected::Ambiguous;
    }
    let base = raw(store, lowest[0]).1;
    let ours = raw(store, target).1;
    let theirs = raw(store, source).1;
    let names: BTreeSet<&String> = base.keys().chain(ours.keys()).chain(theirs.keys()).collect();
    let mut merged = BTreeMap::new();
    let mut conflicts = Vec::new();
    for name in names {
        let (b, o, t) = (base.get(name), ours.get(name), theirs.get(name));
        let changed_o = o != b;
        let changed_t = t != b;
        if changed_o && changed_t && o != t {
            conflicts.push(name.clone());
            continue;
        }
        if let Some(id) = if changed_o { o } else { t } {
            merged.insert(name.clone(), id.clone());
        }
    }
    if conflicts.is_empty() {
        Expected::Merged(merged)
    } else {
        Expected::Conflict(conflicts)
    }
}

fn actual(cat: &Catalog, source: &str, target: &str) -> (Expected, String) {
    let before = cat.head(target).unwrap();
    let source_head = cat.head(source).unwrap();
    let got = match cat.merge(source, target) {
        Ok(MergeOutcome::UpToDate { .. }) => Expected::UpToDate,
        Ok(MergeOutcome::FastForward { head }) => {
            assert_eq!(head, source_head);
            Expected::FastForward
        }
        Ok(MergeOutcome::Merged { commit, .. }) => {
            assert_eq!(commit.parents, vec![before.clone(), source_head]);
            Expected::Merged(commit.tables)
        }
        Err(CatalogError::MergeConflict(t)) => Expected::Conflict(t),
        Err(CatalogError::AmbiguousMergeBase(_)) => Expected::Ambiguous,
        Err(e) => panic!("unexpected merge error: {e}"),
    };
    (got, before)
}

fn pool(store: &ObjectStore) -> BTreeMap<&'static str, Vec<String>> {
    let schema = Schema::new(vec![Column::new("v", ColumnType::Int64, false)]).unwrap();
    TABLES
        .iter()
        .enumerate()
        .map(|(ti, name)| {
            let ids = (0..3)
                .map(|variant| {
                    let rows = ResultSet::new(schema.clone(), vec![vec![Value::Int((ti * 10 + variant) as i64)]]);
                    write_table(store, &uuid_from_seed(name), &schema, &rows, None).unwrap().snapshot_id
                })
                .collect();
            (*name, ids)
        })
        .collect()
}

fn random_commit(cat: &Catalog, rng: &mut StdRng, branch: &str, pool: &BTreeMap<&str, Vec<String>>, allowed: &[&str]) {
    let head = cat.head(branch).unwrap();
    let present = cat.tables_at(&head).unwrap();
    let mut updates = BTreeMap::new();
    for _ in 0..rng.gen_range(1..=2) {
        let name = *allowed.choose(rng).unwrap();
        let update = if present.contains_key(name) && rng.gen_bool(0.25) {
            TableUpdate::Remove
        } else {
            TableUpdate::Set(pool[name].choose(rng).unwrap().clone())
        };
        updates.insert(name.to_string(), update);
    }
    cat.commit_tables(branch, &updates, &format!("edit {branch}"), &head).unwrap();
}

/// Runs `n` random cases plus criss-cross fixtures.
pub fn run_cases(n: usize) -> Result<String, String> {
    let dir = TempDir::new().unwrap();
    let cat = Catalog::new(ObjectStore::open(dir.path()).unwrap(), "richard");
    cat.init().unwrap();
    let pool = pool(cat.store());
    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for case in 0..n {
        let mut rng = StdRng::seed_from_u64(case as u64);
        let (base, src, dst) = (format!("richard.b{case}"), format!("richard.s{case}"), format!("richard.t{case}"));
        cat.create_branch(&base, MAIN).unwrap();
        for _ in 0..rng.gen_range(1..=3) {
            random_commit(&cat, &mut rng, &base, &pool, &TABLES);
        }
        cat.create_branch(&src, &base).unwrap();
        cat.create_branch(&dst, &base).unwrap();
        let (s_steps, t_steps, s_tables, t_tables): (usize, usize, &[&str], &[&str]) = match case % 4 {
            0 => (rng.gen_range(1..=3), 0, &TABLES, &TABLES),
            1 => (0, rng.gen_range(1..=3), &TABLES, &TABLES),
            2 => (rng.gen_range(1..=3), rng.gen_range(1..=3), &TABLES[..3], &TABLES[3..]),
            _ => (rng.gen_range(1..=3), rng.gen_range(1..=3), &TABLES, &TABLES),
        };
        for _ in 0..s_steps {
            random_commit(&cat, &mut rng, &src, &pool, s_tables);
        }
        for _ in 0..t_steps {
            random_commit(&cat, &mut rng, &dst, &pool, t_tables);
        }
        let want = oracle(cat.store(), &cat.head(&src).unwrap(), &cat.head(&dst).unwrap());
        let (got, before) = actual(&cat, &src, &dst);
        if got != want {
            return Err(format!("case {case}: merge gave {got:?}, oracle {want:?}"));
        }
        let after = cat.head(&dst).unwrap();
        let moved = after != before;
        let should_move = matches!(want, Expected::FastForward | Expected::Merged(_));
        if moved != should_move {
            return Err(format!("case {case}: target moved={moved} for {want:?}"));
        }
        let kind = match want {
            Expected::UpToDate => "up-to-date",
            Expected::FastForward => "fast-forward",
            Expected::Merged(_) => "merged",
            Expected::Conflict(_) => "conflict",
            Expected::Ambiguous => "ambiguous",
        };
        *tally.entry(kind).or_default() += 1;
    }
    for kind in ["fast-forward", "merged", "conflict"] {
        if tally.get(kind).copied().unwrap_or(0) == 0 {
            return Err(format!("no {kind} cases generated: {tally:?}"));
        }
    }

    // Criss-cross: each side merges the other's first commit.
    let mut rng = StdRng::seed_from_u64(7);
    cat.create_branch("richard.x_base", MAIN).unwrap();
    random_commit(&cat, &mut rng, "richard.x_base", &pool, &TABLES[..1]);
    cat.create_branch("richard.x_left", "richard.x_base").unwrap();
    cat.create_branch("richard.x_right", "richard.x_base").unwrap();
    random_commit(&cat, &mut rng, "richard.x_left", &pool, &TABLES[1..2]);
    random_commit(&cat, &mut rng, "richard.x_right", &pool, &TABLES[2..3]);
    cat.create_branch("richard.x_left_old", "richard.x_left").unwrap();
    cat.create_branch("richard.x_right_old", "richard.x_right").unwrap();
    cat.merge("richard.x_right_old", "richard.x_left").map_err(|e| e.to_string())?;
    cat.merge("richard.x_left_old", "richard.x_right").map_err(|e| e.to_string())?;
    for (s, t) in [("richard.x_left", "richard.x_right"), ("richard.x_right", "richard.x_left")] {
        let want = oracle(cat.store(), &cat.head(s).unwrap(), &cat.head(t).unwrap());
        if want != Expected::Ambiguous {
            return Err(format!("criss-cross fixture is not ambiguous by the oracle: {want:?}"));
        }
        match cat.merge(s, t) {
            Err(CatalogError::AmbiguousMergeBase(bases)) if bases.len() == 2 => {}
            other => return Err(format!("criss-cross merge {s} -> {t} gave {other:?}")),
        }
    }
    Ok(format!("{n} cases agree with the oracle {tally:?}; criss-cross raises AmbiguousMergeBase"))
}
