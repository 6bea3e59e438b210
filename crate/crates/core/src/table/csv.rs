//! Canonical CSV codec.
//!
//! UTF-8, LF line endings, a header row with the schema's column names, and
//! every line (including the last) terminated by LF. A field is quoted iff it
//! contains a comma, quote, CR or LF, or is the empty string; embedded quotes
//! are doubled. An empty unquoted field is null, so `""` and null stay
//! distinct. Floats use the shortest decimal that round-trips.

use super::schema::{validate_rows, ColumnType, Row, Schema, Value};
use super::TableError;

/// Shortest round-trip decimal for a finite float, written exactly as in
/// canonical JSON: `1.0`, `0.1`, `-2.5e-8`, `1e+300`.
pub fn format_float(x: f64) -> String {
    debug_assert!(x.is_finite());
    serde_json::to_string(&x).expect("finite floats serialize")
}

fn needs_quotes(s: &str) -> bool {
    s.is_empty() || s.bytes().any(|b| matches!(b, b',' | b'"' | b'\r' | b'\n'))
}

fn push_field(out: &mut Vec<u8>, s: &str) {
    if needs_quotes(s) {
        out.push(b'"');
        for b in s.bytes() {
            if b == b'"' {
                out.push(b'"');
            }
            out.push(b);
        }
        out.push(b'"');
    } else {
        out.extend_from_slice(s.as_bytes());
    }
}

/// Encodes `rows` as canonical CSV. Rows are validated against `schema` first.
pub fn encode_csv(schema: &Schema, rows: &[Row]) -> Result<Vec<u8>, TableError> {
    validate_rows(schema, rows)?;
    let mut out = Vec::with_capacity(64 + rows.len() * schema.len() * 8);
    for (i, col) in schema.columns().iter().enumerate() {
        if i > 0 {
            out.push(b',');
        }
        out.extend_from_slice(col.name.as_bytes());
    }
    out.push(b'\n');
    for row in rows {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(b',');
            }
            match v {
                Value::Null => {}
                Value::Int(n) => {
                    use std::io::Write;
                    let _ = write!(out, "{n}");
                }
                Value::Float(x) => out.extend_from_slice(format_float(*x).as_bytes()),
                Value::Bool(true) => out.extend_from_slice(b"true"),
                Value::Bool(false) => out.extend_from_slice(b"false"),
                Value::Str(s) | Value::Timestamp(s) => push_field(&mut out, s),
            }
        }
        out.push(b'\n');
    }
    Ok(out)
}

struct Field {
    text: String,
    quoted: bool,
}

/// Splits CSV text into records. Strict: LF-only line endings, the final
/// record terminated by LF, quotes only around whole fields.
fn split_records(text: &str) -> Result<Vec<Vec<Field>>, TableError> {
    let err = |line: usize, msg: &str| TableError::Encoding(format!("line {line}: {msg}"));
    let mut records = Vec::new();
    let mut record = Vec::new();
    let mut chars = text.chars().peekable();
    let mut line = 1usize;
    if text.is_empty() {
        return Err(err(1, "missing header row"));
    }
    loop {
        // Start of a field.
        let mut field = String::new();
        let quoted = chars.peek() == Some(&'"');
        if quoted {
            chars.next();
            loop {
                match chars.next() {
                    None => return Err(err(line, "unterminated quoted field")),
                    Some('"') => {
                        if chars.peek() == Some(&'"') {
                            chars.next();
                            field.push('"');
                        } else {
                            break;
                        }
                    }
                    Some(c) => {
                        if c == '\n' {
                            line += 1;
                        }
                        field.push(c);
                    }
                }
            }
        } else {
            while let Some(&c) = chars.peek() {
                match c {
                    ',' | '\n' => break,
                    '"' => return Err(err(line, "quote inside unquoted field")),
                    '\r' => return Err(err(line, "carriage return outside quotes")),
                    _ => {
                        field.push(c);
                        chars.next();
                    }
                }
            }
        }
        record.push(Field { text: field, quoted });
        match chars.next() {
            Some(',') => continue,
            Some('\n') => {
                line += 1;
                records.push(std::mem::take(&mut record));
                if chars.peek().is_none() {
                    return Ok(records);
                }
            }
            None => return Err(err(line, "last line is not terminated by LF")),
            Some(_) => return Err(err(line, "expected ',' or LF after quoted field")),
        }
    }
}

fn parse_value(field: &Field, ty: ColumnType) -> Result<Value, String> {
    if !field.quoted && field.text.is_empty() {
        return Ok(Value::Null);
    }
    let s = field.text.as_str();
    match ty {
        ColumnType::String => Ok(Value::Str(field.text.clone())),
        _ if s.is_empty() => Err(format!("empty quoted literal for {ty}")),
        ColumnType::Int64 => s.parse::<i64>().map(Value::Int).map_err(|_| format!("bad int64 literal {s:?}")),
        ColumnType::Float64 => {
            let looks_numeric = s.bytes().all(|b| b.is_ascii_digit() || matches!(b, b'+' | b'-' | b'.' | b'e' | b'E'));
            match s.parse::<f64>() {
                Ok(x) if looks_numeric && x.is_finite() => Ok(Value::Float(x)),
                Ok(_) if !looks_numeric => Err(format!("non-finite float64 literal {s:?}")),
                Ok(_) => Err(format!("float64 literal {s:?} is out of range")),
                Err(_) => Err(format!("bad float64 literal {s:?}")),
            }
        }
        ColumnType::Bool => match s.to_ascii_lowercase().as_str() {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(format!("bad bool literal {s:?}")),
        },
        ColumnType::Timestamp => {
            if super::schema::is_valid_timestamp(s) {
                Ok(Value::Timestamp(field.text.clone()))
            } else {
                Err(format!("bad timestamp literal {s:?}"))
            }
        }
    }
}

/// Decodes CSV bytes written for `schema`. The header must list the schema's
/// columns in order.
pub fn decode_csv(schema: &Schema, bytes: &[u8]) -> Result<Vec<Row>, TableError> {
    let text = std::str::from_utf8(bytes).map_err(|e| TableError::Encoding(format!("invalid UTF-8: {e}")))?;
    let mut records = split_records(text)?.into_iter();
    let header = records.next().ok_or_else(|| TableError::Encoding("missing header row".into()))?;
    let names: Vec<&str> = header.iter().map(|f| f.text.as_str()).collect();
    let expected: Vec<&str> = schema.columns().iter().map(|c| c.name.as_str()).collect();
    if names != expected {
        return Err(TableError::mismatch(
            None,
            None,
            format!("header {names:?} does not match schema columns {expected:?}"),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in records.enumerate() {
        if rec.len() != schema.len() {
            return Err(TableError::Encoding(format!(
                "row {i}: expected {} fields, found {}",
                schema.len(),
                rec.len()
            )));
        }
        let row = rec
            .iter()
            .zip(schema.columns())
            .map(|(f, c)| parse_value(f, c.ty).map_err(|m| TableError::Encoding(format!("row {i}, column {}: {m}", c.name))))
            .collect::<Result<Row, _>>()?;
        rows.push(row);
    }
    validate_rows(schema, &rows)?;
    Ok(rows)
}
