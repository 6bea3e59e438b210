//! Row-at-a-time evaluation of a bound query.

use std::cmp::Ordering;
use std::collections::HashMap;

use super::analyze::{BoundItem, BoundOperand, BoundPredicate, BoundQuery};
use super::ast::AggFunc;
use super::SqlError;
use crate::table::{ColumnType, ResultSet, Row, Value};

/// Hashable stand-in for a value used as a group or join key.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Key {
    Null,
    Int(i64),
    Float(u64),
    Bool(bool),
    Str(String),
}

fn float_key(x: f64) -> Key {
    // -0.0 and 0.0 compare equal and must land in the same bucket.
    Key::Float(if x == 0.0 { 0.0f64.to_bits() } else { x.to_bits() })
}

fn key_of(v: &Value, as_float: bool) -> Key {
    match v {
        Value::Null => Key::Null,
        Value::Int(i) if as_float => float_key(*i as f64),
        Value::Int(i) => Key::Int(*i),
        Value::Float(x) => float_key(*x),
        Value::Bool(b) => Key::Bool(*b),
        Value::Str(s) | Value::Timestamp(s) => Key::Str(s.clone()),
    }
}

fn operand<'a>(row: &'a Row, o: &'a BoundOperand) -> &'a Value {
    match o {
        BoundOperand::Column(i) => &row[*i],
        BoundOperand::Literal(v) => v,
    }
}

/// Three-valued evaluation; `None` is SQL UNKNOWN.
fn eval(p: &BoundPredicate, row: &Row) -> Option<bool> {
    match p {
        BoundPredicate::Compare { left, op, right } => {
            let (l, r) = (operand(row, left), operand(row, right));
            if l.is_null() || r.is_null() {
                return None;
            }
            l.compare(r).map(|o| op.holds(o))
        }
        BoundPredicate::IsNull { column, negated } => Some(row[*column].is_null() != *negated),
        BoundPredicate::Not(a) => eval(a, row).map(|b| !b),
        BoundPredicate::And(a, b) => match (eval(a, row), eval(b, row)) {
            (Some(false), _) | (_, Some(false)) => Some(false),
            (Some(true), Some(true)) => Some(true),
            _ => None,
        },
        BoundPredicate::Or(a, b) => match (eval(a, row), eval(b, row)) {
            (Some(true), _) | (_, Some(true)) => Some(true),
            (Some(false), Some(false)) => Some(false),
            _ => None,
        },
    }
}

fn aggregate(func: AggFunc, arg: Option<usize>, input_type: Option<ColumnType>, rows: &[&Row]) -> Result<Value, SqlError> {
    let Some(col) = arg else {
        return Ok(Value::Int(rows.len() as i64));
    };
    let values = rows.iter().map(|r| &r[col]).filter(|v| !v.is_null());
    match func {
        AggFunc::Count => Ok(Value::Int(values.count() as i64)),
        AggFunc::Min | AggFunc::Max => {
            let mut best: Option<&Value> = None;
            for v in values {
                let better = match best {
                    None => true,
                    Some(b) => {
                        let ord = v.compare(b).unwrap_or(Ordering::Equal);
                        if func == AggFunc::Min {
                            ord == Ordering::Less
                        } else {
                            ord == Ordering::Greater
                        }
                    }
                };
                if better {
                    best = Some(v);
                }
            }
            Ok(best.cloned().unwrap_or(Value::Null))
        }
        AggFunc::Sum | AggFunc::Avg => {
            let values: Vec<&Value> = values.collect();
            if values.is_empty() {
                return Ok(Value::Null);
            }
            let n = values.len() as f64;
            if input_type == Some(ColumnType::Int64) {
                let total: i128 = values
                    .iter()
                    .map(|v| match v {
                        Value::Int(i) => *i as i128,
                        _ => 0,
                    })
                    .sum();
                if func == AggFunc::Avg {
                    return Ok(Value::Float(total as f64 / n));
                }
                return i64::try_from(total)
                    .map(Value::Int)
                    .map_err(|_| SqlError::Overflow(format!("SUM({total}) does not fit in int64")));
            }
            let mut total = 0.0f64;
            for v in &values {
                if let Value::Float(x) = v {
                    total += x;
                }
            }
            let out = if func == AggFunc::Avg { total / n } else { total };
            if !out.is_finite() {
                return Err(SqlError::Overflow(format!("{func} overflowed float64")));
            }
            Ok(Value::Float(out))
        }
    }
}

/// Sort key comparison: nulls order before every other value.
fn null_first(a: &Value, b: &Value) -> Ordering {
    match (a.is_null(), b.is_null()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        _ => a.compare(b).unwrap_or(Ordering::Equal),
    }
}

pub(crate) fn execute(q: &BoundQuery, left: &ResultSet, right: Option<&ResultSet>) -> Result<ResultSet, SqlError> {
    // Scan (and join) into combined rows.
    let combined: Vec<Row> = match (&q.join, right) {
        (Some(j), Some(right)) => {
            let lt = left.schema.columns()[j.left_key].ty;
            let rt = right.schema.columns()[j.right_key].ty;
            let as_float = lt != rt;
            let mut index: HashMap<Key, Vec<usize>> = HashMap::new();
            for (i, r) in right.rows.iter().enumerate() {
                let v = &r[j.right_key];
                if !v.is_null() {
                    index.entry(key_of(v, as_float)).or_default().push(i);
                }
            }
            let mut out = Vec::new();
            for l in &left.rows {
                let v = &l[j.left_key];
                if v.is_null() {
                    continue;
                }
                if let Some(matches) = index.get(&key_of(v, as_float)) {
                    for &i in matches {
                        let mut row = l.clone();
                        row.extend(right.rows[i].iter().cloned());
                        out.push(row);
                    }
                }
            }
            out
        }
        _ => left.rows.clone(),
    };

    let filtered: Vec<Row> = match &q.filter {
        None => combined,
        Some(p) => combined.into_iter().filter(|r| eval(p, r) == Some(true)).collect(),
    };

    let mut rows: Vec<Row> = if q.aggregate {
        let mut order: Vec<Vec<&Row>> = Vec::new();
        if q.group_by.is_empty() {
            order.push(filtered.iter().collect());
        } else {
            let mut slot: HashMap<Vec<Key>, usize> = HashMap::new();
            for r in &filtered {
                let key: Vec<Key> = q.group_by.iter().map(|&i| key_of(&r[i], false)).collect();
                let idx = *slot.entry(key).or_insert_with(|| {
                    order.push(Vec::new());
                    order.len() - 1
                });
                order[idx].push(r);
            }
        }
        let mut out = Vec::with_capacity(order.len());
        for group in &order {
            let mut row = Vec::with_capacity(q.items.len());
            for item in &q.items {
                row.push(match item {
                    BoundItem::Column(i) => group[0][*i].clone(),
                    BoundItem::Aggregate { func, arg, input_type } => aggregate(*func, *arg, *input_type, group)?,
                });
            }
            out.push(row);
        }
        out
    } else {
        filtered
            .into_iter()
            .map(|r| {
                q.items
                    .iter()
                    .map(|item| match item {
                        BoundItem::Column(i) => r[*i].clone(),
                        BoundItem::Aggregate { .. } => unreachable!("aggregate in non-aggregate query"),
                    })
                    .collect()
            })
            .collect()
    };

    if let Some((col, desc)) = q.order_by {
        rows.sort_by(|a, b| {
            let o = null_first(&a[col], &b[col]);
            if desc {
                o.reverse()
            } else {
                o
            }
        });
    }
    if let Some(n) = q.limit {
        rows.truncate(usize::try_from(n).unwrap_or(usize::MAX));
    }
    Ok(ResultSet::new(q.output.clone(), rows))
}
