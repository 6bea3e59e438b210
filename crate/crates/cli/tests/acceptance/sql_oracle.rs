//! Brute-force reference evaluator for the SELECT subset plus a generator of
//! valid (query, dataset) pairs. Written against the documented semantics
//! only: nested-loop join, linear-scan grouping, insertion sort.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use bpln_core::sql::ast::*;
use bpln_core::table::{Column, ColumnType, ResultSet, Schema, Value};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;

// ---------------------------------------------------------------- evaluator

struct Source<'a> {
    name: &'a str,
    schema: &'a Schema,
    offset: usize,
}

fn find(sources: &[Source], c: &ColumnRef) -> (usize, Column) {
    let hits: Vec<(usize, Column)> = sources
        .iter()
        .filter(|s| c.table.as_deref().is_none_or(|t| t == s.name))
        .flat_map(|s| {
            s.schema
                .columns()
                .iter()
                .enumerate()
                .filter(|(_, col)| col.name == c.column)
                .map(move |(i, col)| (s.offset + i, col.clone()))
        })
        .collect();
    assert_eq!(hits.len(), 1, "oracle: column {c} must resolve uniquely");
    hits.into_iter().next().unwrap()
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Int(i) => Some(*i as f64),
        Value::Float(f) => Some(*f),
        _ => None,
    }
}

/// Ordering of two non-null values of comparable types.
fn cmp(a: &Value, b: &Value) -> Ordering {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => x.cmp(y),
        (Value::Bool(x), Value::Bool(y)) => x.cmp(y),
        (Value::Str(x) | Value::Timestamp(x), Value::Str(y) | Value::Timestamp(y)) => x.as_bytes().cmp(y.as_bytes()),
        _ => {
            let (x, y) = (as_f64(a).unwrap(), as_f64(b).unwrap());
            if x < y {
                Ordering::Less
            } else if x > y {
                Ordering::Greater
            } else {
                Ordering::Equal
            }
        }
    }
}

fn operand(sources: &[Source], row: &[Value], o: &Operand) -> Value {
    match o {
        Operand::Column(c) => row[find(sources, c).0].clone(),
        Operand::Literal(Literal::Int(i)) => Value::Int(*i),
        Operand::Literal(Literal::Float(f)) => Value::Float(*f),
        Operand::Literal(Literal::Bool(b)) => Value::Bool(*b),
        Operand::Literal(Literal::Str(s)) => Value::Str(s.clone()),
    }
}

/// Three-valued predicate: `None` is SQL NULL.
fn truth(sources: &[Source], row: &[Value], p: &Predicate) -> Option<bool> {
    match p {
        Predicate::Compare { left, op, right } => {
            let (a, b) = (operand(sources, row, left), operand(sources, row, right));
            if a.is_null() || b.is_null() {
                return None;
            }
            let o = cmp(&a, &b);
            Some(match op {
                CmpOp::Eq => o == Ordering::Equal,
                CmpOp::Ne => o != Ordering::Equal,
                CmpOp::Lt => o == Ordering::Less,
                CmpOp::Le => o != Ordering::Greater,
                CmpOp::Gt => o == Ordering::Greater,
                CmpOp::Ge => o != Ordering::Less,
            })
        }
        Predicate::IsNull { column, negated } => Some(row[find(sources, column).0].is_null() != *negated),
        Predicate::Not(a) => truth(sources, row, a).map(|b| !b),
        Predicate::And(a, b) => match (truth(sources, row, a), truth(sources, row, b)) {
            (Some(false), _) | (_, Some(false)) => Some(false),
            (Some(true), Some(true)) => Some(true),
            _ => None,
        },
        Predicate::Or(a, b) => match (truth(sources, row, a), truth(sources, row, b)) {
            (Some(true), _) | (_, Some(true)) => Some(true),
            (Some(false), Some(false)) => Some(false),
            _ => None,
        },
    }
}

fn same_group(a: &Value, b: &Value) -> bool {
    match (a.is_null(), b.is_null()) {
        (true, true) => true,
        (false, false) => cmp(a, b) == Ordering::Equal,
        _ => false,
    }
}

fn aggregate(func: AggFunc, col: Option<(usize, &Column)>, rows: &[&Vec<Value>]) -> Value {
    let Some((idx, c)) = col else {
        return Value::Int(rows.len() as i64);
    };
    let vals: Vec<&Value> = rows.iter().map(|r| &r[idx]).filter(|v| !v.is_null()).collect();
    match func {
        AggFunc::Count => Value::Int(vals.len() as i64),
        _ if vals.is_empty() => Value::Null,
        AggFunc::Sum => match c.ty {
            ColumnType::Int64 => {
                let mut total: i64 = 0;
                for v in &vals {
                    let Value::Int(i) = v else { unreachable!() };
                    total = total.checked_add(*i).expect("oracle: generated data never overflows");
                }
                Value::Int(total)
            }
            _ => Value::Float(vals.iter().fold(0.0, |acc, v| acc + as_f64(v).unwrap())),
        },
        AggFunc::Avg => {
            let total: f64 = match c.ty {
                ColumnType::Int64 => vals.iter().map(|v| if let Value::Int(i) = v { *i as i128 } else { 0 }).sum::<i128>() as f64,
                _ => vals.iter().fold(0.0, |acc, v| acc + as_f64(v).unwrap()),
            };
            Value::Float(total / vals.len() as f64)
        }
        AggFunc::Min | AggFunc::Max => {
            let mut best = vals[0];
            for v in &vals[1..] {
                let o = cmp(v, best);
                if (func == AggFunc::Min && o == Ordering::Less) || (func == AggFunc::Max && o == Ordering::Greater) {
                    best = v;
                }
            }
            best.clone()
        }
    }
}

/// Ascending order with NULL smallest.
fn order_key(a: &Value, b: &Value) -> Ordering {
    match (a.is_null(), b.is_null()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        _ => cmp(a, b),
    }
}

/// Evaluates `q` over `tables` the slow, obvious way.
pub fn evaluate(q: &SelectQuery, tables: &BTreeMap<String, ResultSet>) -> ResultSet {
    let left = &tables[&q.from];
    let mut sources = vec![Source {
        name: &q.from,
        schema: &left.schema,
        offset: 0,
    }];
    let mut rows: Vec<Vec<Value>> = Vec::new();
    match &q.join {
        None => rows = left.rows.clone(),
        Some(j) => {
            let right = &tables[&j.table];
            sources.push(Source {
                name: &j.table,
                schema: &right.schema,
                offset: left.schema.len(),
            });
            let (a, _) = find(&sources, &j.left);
            let (b, _) = find(&sources, &j.right);
            for l in &left.rows {
                for r in &right.rows {
                    let joined: Vec<Value> = l.iter().chain(r.iter()).cloned().collect();
                    let (x, y) = (&joined[a], &joined[b]);
                    if !x.is_null() && !y.is_null() && cmp(x, y) == Ordering::Equal {
                        rows.push(joined);
                    }
                }
            }
        }
    }
    if let Some(p) = &q.filter {
        rows.retain(|r| truth(&sources, r, p) == Some(true));
    }

    let mut out_cols = Vec::new();
    let mut out_rows: Vec<Vec<Value>> = Vec::new();
    match &q.projection {
        Projection::Star => {
            for s in &sources {
                out_cols.extend(s.schema.columns().iter().cloned());
            }
            out_rows = rows;
        }
        Projection::Items(items) => {
            let is_agg = !q.group_by.is_empty() || items.iter().any(|i| matches!(i.expr, SelectExpr::Aggregate { .. }));
            for (pos, item) in items.iter().enumerate() {
                out_cols.push(match &item.expr {
                    SelectExpr::Column(c) => {
                        let (_, col) = find(&sources, c);
                        Column::new(item.alias.clone().unwrap_or(col.name), col.ty, col.nullable)
                    }
                    SelectExpr::Aggregate { func, arg } => {
                        let name = item.alias.clone().unwrap_or_else(|| format!("agg_{pos}"));
                        let input = match arg {
                            AggArg::Star => None,
                            AggArg::Column(c) => Some(find(&sources, c).1.ty),
                        };
                        match func {
                            AggFunc::Count => Column::new(name, ColumnType::Int64, false),
                            AggFunc::Avg => Column::new(name, ColumnType::Float64, true),
                            _ => Column::new(name, input.unwrap(), true),
                        }
                    }
                });
            }
            if !is_agg {
                for r in &rows {
                    out_rows.push(
                        items
                            .iter()
                            .map(|i| match &i.expr {
                                SelectExpr::Column(c) => r[find(&sources, c).0].clone(),
                                SelectExpr::Aggregate { .. } => unreachable!(),
                            })
                            .collect(),
                    );
                }
            } else {
                let keys: Vec<usize> = q.group_by.iter().map(|c| find(&sources, c).0).collect();
                // Groups in first-occurrence order, found by linear scan.
                let mut groups: Vec<Vec<&Vec<Value>>> = Vec::new();
                if keys.is_empty() {
                    groups.push(rows.iter().collect());
                } else {
                    for r in &rows {
                        match groups.iter_mut().find(|g| keys.iter().all(|&k| same_group(&g[0][k], &r[k]))) {
                            Some(g) => g.push(r),
                            None => groups.push(vec![r]),
                        }
                    }
                }
                for g in &groups {
                    out_rows.push(
                        items
                            .iter()
                            .map(|i| match &i.expr {
                                SelectExpr::Column(c) => g[0][find(&sources, c).0].clone(),
                                SelectExpr::Aggregate { func, arg } => {
                                    let col = match arg {
                                        AggArg::Star => None,
                                        AggArg::Column(c) => Some(find(&sources, c)),
                                    };
                                    aggregate(*func, col.as_ref().map(|(i, c)| (*i, c)), g)
                                }
                            })
                            .collect(),
                    );
                }
            }
        }
    }

    if let Some(ob) = &q.order_by {
        let pos = out_cols.iter().position(|c| c.name == ob.column.column).expect("order column in output");
        // Insertion sort: each row goes after every row that does not sort after it.
        let mut sorted: Vec<Vec<Value>> = Vec::with_capacity(out_rows.len());
        for r in out_rows {
            let mut at = sorted.len();
            while at > 0 {
                let o = order_key(&sorted[at - 1][pos], &r[pos]);
                let after = if ob.descending { o == Ordering::Less } else { o == Ordering::Greater };
                if !after {
                    break;
                }
                at -= 1;
            }
            sorted.insert(at, r);
        }
        out_rows = sorted;
    }
    if let Some(n) = q.limit {
        out_rows.truncate(n as usize);
    }
    ResultSet::new(Schema::new(out_cols).unwrap(), out_rows)
}

// ---------------------------------------------------------------- generator

const TS: [&str; 5] = [
    "2024-01-01T00:00:00Z",
    "2024-01-01T12:30:00Z",
    "2024-02-15T08:00:00Z",
    "2024-03-01T00:00:00Z",
    "2025-01-01T00:00:00Z",
];
const WORDS: [&str; 5] = ["a", "b", "it's", "Zed", ""];

fn maybe_null(rng: &mut StdRng, nullable: bool, v: Value) -> Value {
    if nullable && rng.gen_bool(0.15) {
        Value::Null
    } else {
        v
    }
}

fn random_value(rng: &mut StdRng, ty: ColumnType) -> Value {
    match ty {
        ColumnType::Int64 => Value::Int(rng.gen_range(-5..=5)),
        ColumnType::Float64 => Value::Float(rng.gen_range(-8..=8) as f64 * 0.5),
        ColumnType::Bool => Value::Bool(rng.gen()),
        ColumnType::String => Value::Str(WORDS.choose(rng).unwrap().to_string()),
        ColumnType::Timestamp => Value::Timestamp(TS.choose(rng).unwrap().to_string()),
    }
}

fn table(rng: &mut StdRng, cols: &[(&str, ColumnType, bool)]) -> ResultSet {
    let schema = Schema::new(cols.iter().map(|(n, t, null)| Column::new(*n, *t, *null)).collect()).unwrap();
    let n = rng.gen_range(0..=200);
    let rows = (0..n)
        .map(|_| cols.iter().map(|(_, t, null)| {
            let v = random_value(rng, *t);
            maybe_null(rng, *null, v)
        }).collect())
        .collect();
    ResultSet::new(schema, rows)
}

/// Tables `t` and `u` with disjoint column names.
pub fn random_tables(rng: &mut StdRng) -> BTreeMap<String, ResultSet> {
    use ColumnType::*;
    let t = table(rng, &[("k", Int64, false), ("a", Int64, true), ("x", Float64, true), ("s", String, true), ("ts", Timestamp, false), ("flag", Bool, true)]);
    let u = table(rng, &[("uk", Int64, true), ("v", Int64, true), ("y", Float64, false), ("name", String, true)]);
    BTreeMap::from([("t".to_string(), t), ("u".to_string(), u)])
}

fn sql_literal(v: &Value) -> String {
    match v {
        Value::Int(i) => i.to_string(),
        Value::Float(f) => format!("{f:.1}"),
        Value::Bool(b) => b.to_string(),
        Value::Str(s) | Value::Timestamp(s) => format!("'{}'", s.replace('\'', "''")),
        Value::Null => unreachable!(),
    }
}

struct Col {
    text: String,
    name: String,
    ty: ColumnType,
}

fn predicate(rng: &mut StdRng, cols: &[Col], depth: u32) -> String {
    let roll = if depth == 0 { 0 } else { rng.gen_range(0..6) };
    match roll {
        0 | 1 => {
            let c = cols.choose(rng).unwrap();
            if rng.gen_bool(0.15) {
                return format!("{} IS {}NULL", c.text, if rng.gen() { "NOT " } else { "" });
            }
            let op = ["=", "!=", "<", "<=", ">", ">="].choose(rng).unwrap();
            let peers: Vec<&Col> = cols
                .iter()
                .filter(|o| o.ty == c.ty || (o.ty.is_numeric() && c.ty.is_numeric()))
                .collect();
            let rhs = if rng.gen_bool(0.3) {
                peers.choose(rng).unwrap().text.clone()
            } else {
                // int literal against float column exercises coercion
                let ty = if c.ty == ColumnType::Float64 && rng.gen() { ColumnType::Int64 } else { c.ty };
                sql_literal(&random_value(rng, ty))
            };
            if rng.gen_bool(0.2) {
                let flipped = match *op {
                    "<" => ">",
                    "<=" => ">=",
                    ">" => "<",
                    ">=" => "<=",
                    o => o,
                };
                format!("{rhs} {flipped} {}", c.text)
            } else {
                format!("{} {op} {rhs}", c.text)
            }
        }
        2 => format!("NOT ({})", predicate(rng, cols, depth - 1)),
        3 | 4 => format!("{} AND {}", predicate(rng, cols, depth - 1), predicate(rng, cols, depth - 1)),
        _ => format!("({} OR {})", predicate(rng, cols, depth - 1), predicate(rng, cols, depth - 1)),
    }
}

/// A random query that the grammar accepts and that type-checks.
pub fn random_query(rng: &mut StdRng, tables: &BTreeMap<String, ResultSet>) -> String {
    let joined = rng.gen_bool(0.35);
    let mut cols: Vec<Col> = Vec::new();
    let mut scope = vec!["t"];
    if joined {
        scope.push("u");
    }
    for t in &scope {
        for c in tables[*t].schema.columns() {
            let qualify = joined && rng.gen_bool(0.5);
            cols.push(Col {
                text: if qualify { format!("{t}.{}", c.name) } else { c.name.clone() },
                name: c.name.clone(),
                ty: c.ty,
            });
        }
    }

    let mut out_names: Vec<String> = Vec::new();
    let mut group_by: Vec<String> = Vec::new();
    let projection = match rng.gen_range(0..10) {
        0 => {
            out_names = cols.iter().map(|c| c.name.clone()).collect();
            "*".to_string()
        }
        1..=5 => {
            let n = rng.gen_range(1..=4);
            let mut picked: Vec<&Col> = cols.iter().collect();
            picked.shuffle(rng);
            picked
                .into_iter()
                .take(n)
                .enumerate()
                .map(|(i, c)| {
                    if rng.gen_bool(0.3) {
                        out_names.push(format!("o{i}"));
                        format!("{} AS o{i}", c.text)
                    } else {
                        out_names.push(c.name.clone());
                        c.text.clone()
                    }
                })
                .collect::<Vec<_>>()
                .join(", ")
        }
        _ => {
            let mut keys: Vec<&Col> = cols.iter().filter(|c| c.ty != ColumnType::Float64 || rng.gen_bool(0.3)).collect();
            keys.shuffle(rng);
            keys.truncate(rng.gen_range(0..=2));
            let mut parts = Vec::new();
            for (i, k) in keys.iter().enumerate() {
                group_by.push(k.text.clone());
                if rng.gen() {
                    parts.push(k.text.clone());
                    out_names.push(k.name.clone());
                } else {
                    parts.push(format!("{} AS g{i}", k.text));
                    out_names.push(format!("g{i}"));
                }
            }
            for _ in 0..rng.gen_range(1..=3) {
                let pos = parts.len();
                let func = ["COUNT", "SUM", "AVG", "MIN", "MAX"].choose(rng).unwrap();
                let arg = if *func == "COUNT" && rng.gen() {
                    "*".to_string()
                } else {
                    let ok: Vec<&Col> = cols
                        .iter()
                        .filter(|c| !matches!(*func, "SUM" | "AVG") || c.ty.is_numeric())
                        .collect();
                    ok.choose(rng).unwrap().text.clone()
                };
                if rng.gen() {
                    parts.push(format!("{func}({arg}) AS m{pos}"));
                    out_names.push(format!("m{pos}"));
                } else {
                    parts.push(format!("{}({arg})", func.to_lowercase()));
                    out_names.push(format!("agg_{pos}"));
                }
            }
            parts.join(", ")
        }
    };

    let mut sql = format!("SELECT {projection} FROM t");
    if joined {
        let on = [("t.k", "u.uk"), ("u.uk", "t.a"), ("t.a", "u.v"), ("t.x", "u.y")].choose(rng).unwrap();
        sql += &format!(" JOIN u ON {} = {}", on.0, on.1);
    }
    if rng.gen_bool(0.6) {
        let depth = rng.gen_range(0..=3);
        sql += &format!(" WHERE {}", predicate(rng, &cols, depth));
    }
    if !group_by.is_empty() {
        sql += &format!(" GROUP BY {}", group_by.join(", "));
    }
    if rng.gen_bool(0.6) {
        let name = out_names.choose(rng).unwrap();
        sql += &format!(" ORDER BY {name}{}", [" ASC", " DESC", ""].choose(rng).unwrap());
    }
    if rng.gen_bool(0.3) {
        sql += &format!(" LIMIT {}", rng.gen_range(0..30));
    }
    sql
}
