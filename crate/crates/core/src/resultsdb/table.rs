//! Tabular result sets with typed columns.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Text,
    Boolean,
    Integer,
    Number,
    /// Element symbol, or the property value when no symbol was given.
    Element,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
}

impl Column {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Column {
        Column {
            name: name.into(),
            kind,
            units: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TableError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("header mismatch: expected [{expected}], found [{found}]")]
    Header { expected: String, found: String },
    #[error("row {row}, column '{column}': cannot read '{text}' as {kind:?}")]
    Cell {
        row: usize,
        column: String,
        text: String,
        kind: ColumnKind,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<Value>>,
}

fn cell_text(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn to_csv(&self) -> String {
        if self.columns.is_empty() {
            return String::new();
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))
            .expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(cell_text)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }

    /// Read CSV written by [`Table::to_csv`] back with the given column
    /// schema. Empty cells read back as null.
    pub fn from_csv(columns: Vec<Column>, text: &str) -> Result<Table, TableError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let expected: Vec<&str> = columns.iter().map(|c| c.name.as_str()).collect();
        if header != expected {
            return Err(TableError::Header {
                expected: expected.join(", "),
                found: header.join(", "),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = columns
                .iter()
                .zip(rec.iter())
                .map(|(c, text)| {
                    parse_cell(c.kind, text).ok_or_else(|| TableError::Cell {
                        row: i + 1,
                        column: c.name.clone(),
                        text: text.to_string(),
                        kind: c.kind,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok(Table { columns, rows })
    }

    /// One JSON object per row, keys in column order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for obj in self.objects() {
            out.push_str(&Value::Object(obj).to_string());
            out.push('\n');
        }
        out
    }

    pub fn objects(&self) -> Vec<Map<String, Value>> {
        self.rows
            .iter()
            .map(|row| {
                self.columns
                    .iter()
                    .zip(row)
                    .map(|(c, v)| (c.name.clone(), v.clone()))
                    .collect()
            })
            .collect()
    }

    /// Plain-text rendering with aligned columns.
    pub fn render(&self) -> String {
        if self.columns.is_empty() {
            return String::new();
        }
        let header: Vec<String> = self
            .columns
            .iter()
            .map(|c| match &c.units {
                Some(u) if !u.is_empty() => format!("{} [{u}]", c.name),
                _ => c.name.clone(),
            })
            .collect();
        let cells: Vec<Vec<String>> = self.rows.iter().map(|r| r.iter().map(cell_text).collect()).collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                cells
                    .iter()
                    .map(|r| r[i].chars().count())
                    .chain([header[i].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let mut line = |fields: &[String]| {
            let text: Vec<String> = fields
                .iter()
                .zip(&widths)
                .map(|(f, w)| format!("{f:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", text.join("  ").trim_end());
        };
        line(&header);
        for r in &cells {
            line(r);
        }
        out
    }
}

fn parse_cell(kind: ColumnKind, text: &str) -> Option<Value> {
    if text.is_empty() {
        return Some(Value::Null);
    }
    match kind {
        ColumnKind::Text => Some(Value::String(text.to_string())),
        ColumnKind::Boolean => text.parse::<bool>().ok().map(Value::Bool),
        ColumnKind::Integer => text.parse::<i64>().ok().map(Value::from),
        ColumnKind::Number => number(text),
        ColumnKind::Element => Some(number(text).unwrap_or_else(|| Value::String(text.to_string()))),
    }
}

fn number(text: &str) -> Option<Value> {
    text.parse::<f64>().ok().filter(|f| f.is_finite()).map(Value::from)
}
