//! Name resolution and type checking. Produces a [`BoundQuery`] whose column
//! references are positions in the combined (left ++ right) row.

use std::collections::{BTreeMap, HashSet};

use super::ast::*;
use super::SqlError;
use crate::table::{is_valid_timestamp, Column, ColumnType, Schema, Value};

#[derive(Debug, Clone)]
pub(crate) enum BoundOperand {
    Column(usize),
    Literal(Value),
}

#[derive(Debug, Clone)]
pub(crate) enum BoundPredicate {
    Compare {
        left: BoundOperand,
        op: CmpOp,
        right: BoundOperand,
    },
    IsNull {
        column: usize,
        negated: bool,
    },
    And(Box<BoundPredicate>, Box<BoundPredicate>),
    Or(Box<BoundPredicate>, Box<BoundPredicate>),
    Not(Box<BoundPredicate>),
}

#[derive(Debug, Clone)]
pub(crate) enum BoundItem {
    Column(usize),
    Aggregate {
        func: AggFunc,
        /// `None` for `COUNT(*)`.
        arg: Option<usize>,
        input_type: Option<ColumnType>,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct BoundJoin {
    pub table: String,
    pub left_key: usize,
    /// Position within the right table's own schema.
    pub right_key: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BoundQuery {
    pub from: String,
    pub join: Option<BoundJoin>,
    pub filter: Option<BoundPredicate>,
    pub items: Vec<BoundItem>,
    pub aggregate: bool,
    pub group_by: Vec<usize>,
    pub order_by: Option<(usize, bool)>,
    pub limit: Option<u64>,
    pub output: Schema,
}

struct Scope<'a> {
    tables: Vec<(&'a str, &'a Schema)>,
}

impl Scope<'_> {
    fn offset(&self, side: usize) -> usize {
        self.tables[..side].iter().map(|(_, s)| s.len()).sum()
    }

    fn resolve(&self, c: &ColumnRef) -> Result<(usize, &Column), SqlError> {
        let mut hits = Vec::new();
        for (side, (name, schema)) in self.tables.iter().enumerate() {
            if let Some(t) = &c.table {
                if t != name {
                    continue;
                }
            }
            if let Some(i) = schema.index_of(&c.column) {
                hits.push((self.offset(side) + i, &schema.columns()[i]));
            }
        }
        if let Some(t) = &c.table {
            if !self.tables.iter().any(|(n, _)| n == t) {
                return Err(SqlError::UnknownTable(t.clone()));
            }
        }
        match hits.len() {
            0 => Err(SqlError::UnknownColumn(c.to_string())),
            1 => Ok(hits[0]),
            _ => Err(SqlError::AmbiguousColumn(c.column.clone())),
        }
    }

    fn side_of(&self, idx: usize) -> usize {
        if idx < self.tables[0].1.len() {
            0
        } else {
            1
        }
    }
}

fn literal_type(l: &Literal) -> ColumnType {
    match l {
        Literal::Int(_) => ColumnType::Int64,
        Literal::Float(_) => ColumnType::Float64,
        Literal::Str(_) => ColumnType::String,
        Literal::Bool(_) => ColumnType::Bool,
    }
}

fn literal_value(l: &Literal) -> Value {
    match l {
        Literal::Int(i) => Value::Int(*i),
        Literal::Float(f) => Value::Float(*f),
        Literal::Str(s) => Value::Str(s.clone()),
        Literal::Bool(b) => Value::Bool(*b),
    }
}

/// Whether values of the two types may be compared.
pub(crate) fn comparable(a: ColumnType, b: ColumnType) -> bool {
    a == b || (a.is_numeric() && b.is_numeric())
}

fn bind_predicate(scope: &Scope, p: &Predicate) -> Result<BoundPredicate, SqlError> {
    Ok(match p {
        Predicate::And(a, b) => BoundPredicate::And(Box::new(bind_predicate(scope, a)?), Box::new(bind_predicate(scope, b)?)),
        Predicate::Or(a, b) => BoundPredicate::Or(Box::new(bind_predicate(scope, a)?), Box::new(bind_predicate(scope, b)?)),
        Predicate::Not(a) => BoundPredicate::Not(Box::new(bind_predicate(scope, a)?)),
        Predicate::IsNull { column, negated } => BoundPredicate::IsNull {
            column: scope.resolve(column)?.0,
            negated: *negated,
        },
        Predicate::Compare { left, op, right } => {
            let bind = |o: &Operand| -> Result<(BoundOperand, ColumnType, bool), SqlError> {
                match o {
                    Operand::Column(c) => {
                        let (i, col) = scope.resolve(c)?;
                        Ok((BoundOperand::Column(i), col.ty, false))
                    }
                    Operand::Literal(l) => Ok((BoundOperand::Literal(literal_value(l)), literal_type(l), true)),
                }
            };
            let (mut l, mut lt, l_lit) = bind(left)?;
            let (mut r, mut rt, r_lit) = bind(right)?;
            // A string literal against a timestamp column is a timestamp literal.
            let (lt0, rt0) = (lt, rt);
            for (operand, ty, is_lit, other) in [(&mut l, &mut lt, l_lit, rt0), (&mut r, &mut rt, r_lit, lt0)] {
                if is_lit && *ty == ColumnType::String && other == ColumnType::Timestamp {
                    if let BoundOperand::Literal(Value::Str(s)) = operand {
                        if !is_valid_timestamp(s) {
                            return Err(SqlError::TypeError(format!(
                                "{s:?} is not a timestamp literal (expected YYYY-MM-DDTHH:MM:SSZ)"
                            )));
                        }
                        *operand = BoundOperand::Literal(Value::Timestamp(s.clone()));
                        *ty = ColumnType::Timestamp;
                    }
                }
            }
            if !comparable(lt, rt) {
                return Err(SqlError::TypeError(format!("cannot compare {lt} with {rt}")));
            }
            BoundPredicate::Compare { left: l, op: *op, right: r }
        }
    })
}

fn aggregate_column(func: AggFunc, input: Option<&Column>) -> Result<(ColumnType, bool), SqlError> {
    match (func, input) {
        (AggFunc::Count, _) => Ok((ColumnType::Int64, false)),
        (AggFunc::Sum, Some(c)) if c.ty.is_numeric() => Ok((c.ty, true)),
        (AggFunc::Avg, Some(c)) if c.ty.is_numeric() => Ok((ColumnType::Float64, true)),
        (AggFunc::Min | AggFunc::Max, Some(c)) => Ok((c.ty, true)),
        (f, Some(c)) => Err(SqlError::TypeError(format!("{f} is not defined for {}", c.ty))),
        (f, None) => Err(SqlError::TypeError(format!("{f}(*) is not supported"))),
    }
}

pub(crate) fn bind(query: &SelectQuery, schemas: &BTreeMap<String, Schema>) -> Result<BoundQuery, SqlError> {
    let lookup = |name: &String| schemas.get(name).ok_or_else(|| SqlError::UnknownTable(name.clone()));
    let left_schema = lookup(&query.from)?;
    let mut scope = Scope {
        tables: vec![(query.from.as_str(), left_schema)],
    };
    let mut join = None;
    if let Some(j) = &query.join {
        if j.table == query.from {
            return Err(SqlError::Unsupported("self-joins".into()));
        }
        scope.tables.push((j.table.as_str(), lookup(&j.table)?));
        let (a, ca) = scope.resolve(&j.left)?;
        let (b, cb) = scope.resolve(&j.right)?;
        let (left_key, right_key) = match (scope.side_of(a), scope.side_of(b)) {
            (0, 1) => (a, b),
            (1, 0) => (b, a),
            _ => {
                return Err(SqlError::TypeError(
                    "join condition must compare a column of each joined table".into(),
                ))
            }
        };
        if !comparable(ca.ty, cb.ty) {
            return Err(SqlError::TypeError(format!("cannot join {} with {}", ca.ty, cb.ty)));
        }
        join = Some(BoundJoin {
            table: j.table.clone(),
            left_key,
            right_key: right_key - left_schema.len(),
        });
    }

    let filter = query.filter.as_ref().map(|p| bind_predicate(&scope, p)).transpose()?;

    let group_by = query
        .group_by
        .iter()
        .map(|c| scope.resolve(c).map(|(i, _)| i))
        .collect::<Result<Vec<_>, _>>()?;

    let mut items = Vec::new();
    let mut out_cols = Vec::new();
    let mut item_sources: Vec<Option<usize>> = Vec::new();
    match &query.projection {
        Projection::Star => {
            for (side, (_, schema)) in scope.tables.iter().enumerate() {
                for (i, c) in schema.columns().iter().enumerate() {
                    let idx = scope.offset(side) + i;
                    items.push(BoundItem::Column(idx));
                    item_sources.push(Some(side));
                    out_cols.push(c.clone());
                }
            }
        }
        Projection::Items(list) => {
            for (pos, item) in list.iter().enumerate() {
                match &item.expr {
                    SelectExpr::Column(c) => {
                        let (idx, col) = scope.resolve(c)?;
                        items.push(BoundItem::Column(idx));
                        item_sources.push(Some(scope.side_of(idx)));
                        let name = item.alias.clone().unwrap_or_else(|| col.name.clone());
                        out_cols.push(Column::new(name, col.ty, col.nullable));
                    }
                    SelectExpr::Aggregate { func, arg } => {
                        let (arg_idx, input) = match arg {
                            AggArg::Star => (None, None),
                            AggArg::Column(c) => {
                                let (i, col) = scope.resolve(c)?;
                                (Some(i), Some(col))
                            }
                        };
                        let (ty, nullable) = aggregate_column(*func, input)?;
                        items.push(BoundItem::Aggregate {
                            func: *func,
                            arg: arg_idx,
                            input_type: input.map(|c| c.ty),
                        });
                        item_sources.push(None);
                        let name = item.alias.clone().unwrap_or_else(|| format!("agg_{pos}"));
                        out_cols.push(Column::new(name, ty, nullable));
                    }
                }
            }
        }
    }

    let aggregate = !group_by.is_empty() || items.iter().any(|i| matches!(i, BoundItem::Aggregate { .. }));
    if aggregate {
        if matches!(query.projection, Projection::Star) {
            return Err(SqlError::TypeError("SELECT * cannot be combined with GROUP BY".into()));
        }
        for (item, col) in items.iter().zip(&out_cols) {
            if let BoundItem::Column(idx) = item {
                if !group_by.contains(idx) {
                    return Err(SqlError::TypeError(format!(
                        "column {} must appear in GROUP BY or inside an aggregate",
                        col.name
                    )));
                }
            }
        }
    }

    let mut seen = HashSet::new();
    for c in &out_cols {
        if !seen.insert(c.name.as_str()) {
            return Err(SqlError::DuplicateColumn(c.name.clone()));
        }
    }
    let output = Schema::new(out_cols).map_err(|e| SqlError::TypeError(e.to_string()))?;

    let order_by = match &query.order_by {
        None => None,
        Some(ob) => {
            let pos = output
                .columns()
                .iter()
                .enumerate()
                .position(|(i, c)| {
                    c.name == ob.column.column
                        && match &ob.column.table {
                            None => true,
                            Some(t) => item_sources[i].is_some_and(|side| scope.tables[side].0 == t),
                        }
                })
                .ok_or_else(|| SqlError::UnknownColumn(format!("{} (ORDER BY must name an output column)", ob.column)))?;
            Some((pos, ob.descending))
        }
    };

    Ok(BoundQuery {
        from: query.from.clone(),
        join,
        filter,
        items,
        aggregate,
        group_by,
        order_by,
        limit: query.limit,
        output,
    })
}
