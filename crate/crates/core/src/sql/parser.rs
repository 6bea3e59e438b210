//! Tokenizer and recursive-descent parser for the SELECT subset.
//!
//! ```text
//! SELECT (* | item ("," item)*) FROM ident
//!   (JOIN ident ON ident.ident = ident.ident)?
//!   (WHERE pred)?
//!   (GROUP BY col ("," col)*)?
//!   (ORDER BY col (ASC|DESC)?)?
//!   (LIMIT int)?
//! item := col (AS ident)? | fn "(" (* | col) ")" (AS ident)?
//! pred := or ; or := and (OR and)* ; and := not (AND not)* ; not := NOT not | atom
//! atom := "(" pred ")" | col IS NOT? NULL | operand cmp operand
//! ```

use std::collections::BTreeSet;

use super::ast::*;
use super::SqlError;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Kw(&'static str),
    Number(String),
    Str(String),
    Comma,
    Dot,
    LParen,
    RParen,
    Star,
    Minus,
    Op(CmpOp),
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Kw(k) => k.to_string(),
            Tok::Number(n) => format!("number {n}"),
            Tok::Str(_) => "string literal".into(),
            Tok::Comma => "`,`".into(),
            Tok::Dot => "`.`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Star => "`*`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Op(_) => "comparison operator".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

const KEYWORDS: &[&str] = &[
    "SELECT", "FROM", "JOIN", "INNER", "ON", "WHERE", "GROUP", "ORDER", "BY", "ASC", "DESC", "LIMIT", "AS", "AND",
    "OR", "NOT", "IS", "NULL", "TRUE", "FALSE",
];

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex_error(line: usize, col: usize, message: impl Into<String>) -> SqlError {
    SqlError::Parse {
        line,
        column: col,
        message: message.into(),
        expected: Vec::new(),
    }
}

fn tokenize(text: &str) -> Result<Vec<Spanned>, SqlError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let (start_line, start_col) = (line, col);
        let mut advance = |n: usize, i: &mut usize| {
            for _ in 0..n {
                if chars[*i] == '\n' {
                    line += 1;
                    col = 1;
                } else {
                    col += 1;
                }
                *i += 1;
            }
        };
        if c.is_whitespace() {
            advance(1, &mut i);
            continue;
        }
        if c == '-' && chars.get(i + 1) == Some(&'-') {
            while i < chars.len() && chars[i] != '\n' {
                advance(1, &mut i);
            }
            continue;
        }
        let tok = if c.is_ascii_alphabetic() || c == '_' {
            let mut j = i;
            while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
                j += 1;
            }
            let word: String = chars[i..j].iter().collect();
            advance(j - i, &mut i);
            let upper = word.to_ascii_uppercase();
            match KEYWORDS.iter().find(|k| **k == upper) {
                Some(k) => Tok::Kw(k),
                None => Tok::Ident(word.to_ascii_lowercase()),
            }
        } else if c.is_ascii_digit() {
            let mut j = i;
            while j < chars.len() && chars[j].is_ascii_digit() {
                j += 1;
            }
            if chars.get(j) == Some(&'.') && chars.get(j + 1).is_some_and(|d| d.is_ascii_digit()) {
                j += 1;
                while j < chars.len() && chars[j].is_ascii_digit() {
                    j += 1;
                }
            }
            if chars.get(j).is_some_and(|d| d.is_ascii_alphabetic() || *d == '_') {
                return Err(lex_error(start_line, start_col, "malformed number"));
            }
            let n: String = chars[i..j].iter().collect();
            advance(j - i, &mut i);
            Tok::Number(n)
        } else if c == '\'' {
            let mut s = String::new();
            advance(1, &mut i);
            loop {
                match chars.get(i) {
                    None => return Err(lex_error(start_line, start_col, "unterminated string literal")),
                    Some('\'') if chars.get(i + 1) == Some(&'\'') => {
                        s.push('\'');
                        advance(2, &mut i);
                    }
                    Some('\'') => {
                        advance(1, &mut i);
                        break;
                    }
                    Some(&ch) => {
                        s.push(ch);
                        advance(1, &mut i);
                    }
                }
            }
            Tok::Str(s)
        } else {
            let next = chars.get(i + 1).copied();
            let (tok, len) = match (c, next) {
                ('<', Some('=')) => (Tok::Op(CmpOp::Le), 2),
                ('>', Some('=')) => (Tok::Op(CmpOp::Ge), 2),
                ('!', Some('=')) | ('<', Some('>')) => (Tok::Op(CmpOp::Ne), 2),
                ('<', _) => (Tok::Op(CmpOp::Lt), 1),
                ('>', _) => (Tok::Op(CmpOp::Gt), 1),
                ('=', _) => (Tok::Op(CmpOp::Eq), 1),
                (',', _) => (Tok::Comma, 1),
                ('.', _) => (Tok::Dot, 1),
                ('(', _) => (Tok::LParen, 1),
                (')', _) => (Tok::RParen, 1),
                ('*', _) => (Tok::Star, 1),
                ('-', _) => (Tok::Minus, 1),
                (';', _) => {
                    // A single trailing semicolon is tolerated.
                    advance(1, &mut i);
                    continue;
                }
                _ => return Err(lex_error(start_line, start_col, format!("unexpected character {c:?}"))),
            };
            advance(len, &mut i);
            tok
        };
        out.push(Spanned {
            tok,
            line: start_line,
            col: start_col,
        });
    }
    out.push(Spanned { tok: Tok::Eof, line, col });
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        &self.toks[(self.pos + n).min(self.toks.len() - 1)].tok
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &[&str]) -> SqlError {
        let here = &self.toks[self.pos];
        let expected: BTreeSet<String> = expected.iter().map(|s| s.to_string()).collect();
        SqlError::Parse {
            line: here.line,
            column: here.col,
            message: format!("unexpected {}", here.tok.describe()),
            expected: expected.into_iter().collect(),
        }
    }

    fn error_msg(&self, message: impl Into<String>) -> SqlError {
        let here = &self.toks[self.pos];
        SqlError::Parse {
            line: here.line,
            column: here.col,
            message: message.into(),
            expected: Vec::new(),
        }
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Tok::Kw(k) if *k == kw) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &'static str) -> Result<(), SqlError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(self.error(&[kw]))
        }
    }

    fn expect(&mut self, tok: Tok, name: &str) -> Result<(), SqlError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.error(&[name]))
        }
    }

    fn ident(&mut self) -> Result<String, SqlError> {
        match self.peek() {
            Tok::Ident(s) => {
                let s = s.clone();
                self.bump();
                Ok(s)
            }
            _ => Err(self.error(&["identifier"])),
        }
    }

    fn column_ref(&mut self) -> Result<ColumnRef, SqlError> {
        let first = self.ident()?;
        if *self.peek() == Tok::Dot {
            self.bump();
            let column = self.ident()?;
            Ok(ColumnRef {
                table: Some(first),
                column,
            })
        } else {
            Ok(ColumnRef::bare(first))
        }
    }

    fn query(&mut self) -> Result<SelectQuery, SqlError> {
        self.expect_kw("SELECT")?;
        let projection = if *self.peek() == Tok::Star {
            self.bump();
            Projection::Star
        } else {
            let mut items = vec![self.select_item()?];
            while *self.peek() == Tok::Comma {
                self.bump();
                items.push(self.select_item()?);
            }
            Projection::Items(items)
        };
        if !matches!(self.peek(), Tok::Kw("FROM")) {
            return Err(self.error(&["FROM", "`,`", "AS"]));
        }
        self.bump();
        let from = self.ident()?;

        let join = if matches!(self.peek(), Tok::Kw("JOIN") | Tok::Kw("INNER")) {
            if self.eat_kw("INNER") && !matches!(self.peek(), Tok::Kw("JOIN")) {
                return Err(self.error(&["JOIN"]));
            }
            self.expect_kw("JOIN")?;
            let table = self.ident()?;
            self.expect_kw("ON")?;
            let left = self.qualified_ref()?;
            self.expect(Tok::Op(CmpOp::Eq), "`=`")?;
            let right = self.qualified_ref()?;
            Some(Join { table, left, right })
        } else {
            None
        };

        let filter = if self.eat_kw("WHERE") { Some(self.predicate()?) } else { None };

        let mut group_by = Vec::new();
        if self.eat_kw("GROUP") {
            self.expect_kw("BY")?;
            group_by.push(self.column_ref()?);
            while *self.peek() == Tok::Comma {
                self.bump();
                group_by.push(self.column_ref()?);
            }
        }

        let order_by = if self.eat_kw("ORDER") {
            self.expect_kw("BY")?;
            let column = self.column_ref()?;
            let descending = if self.eat_kw("DESC") {
                true
            } else {
                self.eat_kw("ASC");
                false
            };
            Some(OrderBy { column, descending })
        } else {
            None
        };

        let limit = if self.eat_kw("LIMIT") {
            match self.bump() {
                Tok::Number(n) if !n.contains('.') => {
                    Some(n.parse::<u64>().map_err(|_| self.error_msg("LIMIT out of range"))?)
                }
                _ => {
                    self.pos -= 1;
                    return Err(self.error(&["non-negative integer"]));
                }
            }
        } else {
            None
        };

        if *self.peek() != Tok::Eof {
            let mut expected = vec!["end of input"];
            if filter.is_none() && group_by.is_empty() && order_by.is_none() && limit.is_none() {
                expected.push("WHERE");
            }
            if order_by.is_none() && limit.is_none() {
                expected.extend(["GROUP", "ORDER"]);
            }
            if limit.is_none() {
                expected.push("LIMIT");
            }
            return Err(self.error(&expected));
        }
        Ok(SelectQuery {
            projection,
            from,
            join,
            filter,
            group_by,
            order_by,
            limit,
        })
    }

    fn qualified_ref(&mut self) -> Result<ColumnRef, SqlError> {
        let table = self.ident()?;
        self.expect(Tok::Dot, "`.`")?;
        let column = self.ident()?;
        Ok(ColumnRef {
            table: Some(table),
            column,
        })
    }

    fn select_item(&mut self) -> Result<SelectItem, SqlError> {
        let expr = match (self.peek().clone(), self.peek_at(1).clone()) {
            (Tok::Ident(name), Tok::LParen) if AggFunc::from_name(&name).is_some() => {
                let func = AggFunc::from_name(&name).unwrap();
                self.bump();
                self.bump();
                let arg = if *self.peek() == Tok::Star {
                    if func != AggFunc::Count {
                        return Err(self.error_msg(format!("{func}(*) is not supported; only COUNT(*)")));
                    }
                    self.bump();
                    AggArg::Star
                } else {
                    AggArg::Column(self.column_ref()?)
                };
                self.expect(Tok::RParen, "`)`")?;
                SelectExpr::Aggregate { func, arg }
            }
            (Tok::Ident(_), _) => SelectExpr::Column(self.column_ref()?),
            _ => return Err(self.error(&["`*`", "column", "aggregate"])),
        };
        let alias = if self.eat_kw("AS") { Some(self.ident()?) } else { None };
        Ok(SelectItem { expr, alias })
    }

    fn predicate(&mut self) -> Result<Predicate, SqlError> {
        let mut left = self.and_pred()?;
        while self.eat_kw("OR") {
            let right = self.and_pred()?;
            left = Predicate::Or(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn and_pred(&mut self) -> Result<Predicate, SqlError> {
        let mut left = self.not_pred()?;
        while self.eat_kw("AND") {
            let right = self.not_pred()?;
            left = Predicate::And(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn not_pred(&mut self) -> Result<Predicate, SqlError> {
        if self.eat_kw("NOT") {
            return Ok(Predicate::Not(Box::new(self.not_pred()?)));
        }
        if *self.peek() == Tok::LParen {
            self.bump();
            let p = self.predicate()?;
            self.expect(Tok::RParen, "`)`")?;
            return Ok(p);
        }
        let left = self.operand()?;
        if matches!(self.peek(), Tok::Kw("IS")) {
            let Operand::Column(column) = left else {
                return Err(self.error_msg("IS [NOT] NULL applies to columns only"));
            };
            self.bump();
            let negated = self.eat_kw("NOT");
            self.expect_kw("NULL")?;
            return Ok(Predicate::IsNull { column, negated });
        }
        let op = match self.peek() {
            Tok::Op(op) => *op,
            _ => return Err(self.error(&["comparison operator", "IS"])),
        };
        self.bump();
        if matches!(self.peek(), Tok::Kw("NULL")) {
            return Err(self.error_msg("comparison with NULL is never true; use IS NULL / IS NOT NULL"));
        }
        let right = self.operand()?;
        Ok(Predicate::Compare { left, op, right })
    }

    fn operand(&mut self) -> Result<Operand, SqlError> {
        let negative = if *self.peek() == Tok::Minus {
            self.bump();
            if !matches!(self.peek(), Tok::Number(_)) {
                return Err(self.error(&["number"]));
            }
            true
        } else {
            false
        };
        match self.peek().clone() {
            Tok::Ident(_) => Ok(Operand::Column(self.column_ref()?)),
            Tok::Number(n) => {
                let text = if negative { format!("-{n}") } else { n };
                let lit = if text.contains('.') {
                    Literal::Float(text.parse().map_err(|_| self.error_msg("bad decimal literal"))?)
                } else {
                    Literal::Int(text.parse().map_err(|_| self.error_msg("integer literal out of range"))?)
                };
                self.bump();
                Ok(Operand::Literal(lit))
            }
            Tok::Str(s) => {
                self.bump();
                Ok(Operand::Literal(Literal::Str(s)))
            }
            Tok::Kw("TRUE") => {
                self.bump();
                Ok(Operand::Literal(Literal::Bool(true)))
            }
            Tok::Kw("FALSE") => {
                self.bump();
                Ok(Operand::Literal(Literal::Bool(false)))
            }
            Tok::Kw("NULL") => Err(self.error_msg("NULL is only allowed in IS NULL / IS NOT NULL")),
            _ => Err(self.error(&["column", "literal", "`(`", "NOT"])),
        }
    }
}

/// Parses one SELECT statement.
pub fn parse_sql(text: &str) -> Result<SelectQuery, SqlError> {
    let toks = tokenize(text)?;
    Parser { toks, pos: 0 }.query()
}
