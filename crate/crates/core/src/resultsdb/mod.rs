//! Append-only results database.
//!
//! The source of truth is `results.jsonl`, one record per line. Array, List
//! and Dictionary values are kept out of the log in a content-addressed
//! `payloads/` store and referenced as `sha256:<hex>`. An in-memory index by
//! tool is rebuilt from the log on open and caught up before every read.

mod query;
mod table;

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;
use ulid::Ulid;

pub use query::{Atom, FieldPath, Op, QueryPredicate};
pub use table::{Column, ColumnKind, Table, TableError};

use crate::cache::{canonical_json, CacheKey};
use crate::manifest::{Kind, RevisionTag, ToolManifest};
use crate::record::{RecordId, RunRecord, RunStatus, StepResult};
use crate::values::TypedValue;

pub const LOG_FILE: &str = "results.jsonl";

#[derive(Debug, Error)]
pub enum DbError {
    #[error("results database i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("results log line {line} is unreadable: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("record {0} already exists")]
    DuplicateId(RecordId),
    #[error("record id {0} does not sort after the newest stored record")]
    IdOutOfOrder(RecordId),
    #[error("no record with id {0}")]
    NotFound(RecordId),
    #[error("payload {digest}: {reason}")]
    Payload { digest: String, reason: String },
    #[error("unknown field '{0}'")]
    UnknownField(String),
    #[error("predicate on '{field}': {reason}")]
    TypeErrorInPredicate { field: String, reason: String },
    #[error("cannot parse predicate {0}")]
    BadPredicate(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DbError + '_ {
    move |source| DbError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A value as held in the log: inline, or a reference into the payload
/// store.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Cell {
    Value(TypedValue),
    Ref { kind: Kind, reference: String },
}

impl Cell {
    /// `sha256:<hex>` for non-scalar values.
    fn reference(&self) -> Option<String> {
        match self {
            Cell::Ref { reference, .. } => Some(reference.clone()),
            Cell::Value(TypedValue::Image(img)) => Some(format!("sha256:{}", img.sha256)),
            Cell::Value(_) => None,
        }
    }

    fn table_value(&self) -> Value {
        match self {
            Cell::Value(v) => v.scalar_cell().or_else(|| self.reference().map(Value::String)),
            Cell::Ref { reference, .. } => Some(Value::String(reference.clone())),
        }
        .unwrap_or(Value::Null)
    }
}

impl Serialize for Cell {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Cell::Value(v) => v.serialize(s),
            Cell::Ref { kind, reference } => {
                serde_json::json!({ "type": kind.name(), "ref": reference }).serialize(s)
            }
        }
    }
}

impl<'de> Deserialize<'de> for Cell {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let v = Value::deserialize(d)?;
        match v.get("ref").and_then(Value::as_str) {
            Some(r) => {
                let kind = v
                    .get("type")
                    .and_then(Value::as_str)
                    .ok_or_else(|| D::Error::custom("reference without a type"))?
                    .parse()
                    .map_err(D::Error::custom)?;
                Ok(Cell::Ref {
                    kind,
                    reference: r.to_string(),
                })
            }
            None => serde_json::from_value(v).map(Cell::Value).map_err(D::Error::custom),
        }
    }
}

/// One log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Entry {
    id: RecordId,
    tool: String,
    revision: RevisionTag,
    cache_key: CacheKey,
    status: RunStatus,
    started: DateTime<Utc>,
    finished: DateTime<Utc>,
    cache_hit: bool,
    steps: Vec<StepResult>,
    inputs: IndexMap<String, Cell>,
    outputs: IndexMap<String, Cell>,
}

/// A flattened record: metadata columns, then `input.<name>` and
/// `output.<name>` cells. Scalars are inline; other kinds appear as their
/// `sha256:<hex>` reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub id: RecordId,
    pub columns: IndexMap<String, Value>,
}

impl ResultRow {
    pub fn get(&self, column: &str) -> Option<&Value> {
        self.columns.get(column)
    }
}

const BASE_COLUMNS: [&str; 8] = [
    "id", "tool", "revision", "status", "started", "finished", "cache_hit", "cache_key",
];

fn timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Micros, true)
}

impl Entry {
    fn row(&self) -> ResultRow {
        let mut columns = IndexMap::new();
        columns.insert("id".into(), Value::String(self.id.to_string()));
        columns.insert("tool".into(), Value::String(self.tool.clone()));
        columns.insert("revision".into(), Value::String(self.revision.to_string()));
        columns.insert("status".into(), Value::String(self.status.to_string()));
        columns.insert("started".into(), Value::String(timestamp(&self.started)));
        columns.insert("finished".into(), Value::String(timestamp(&self.finished)));
        columns.insert("cache_hit".into(), Value::Bool(self.cache_hit));
        columns.insert("cache_key".into(), Value::String(self.cache_key.to_string()));
        for (name, cell) in &self.inputs {
            columns.insert(format!("input.{name}"), cell.table_value());
        }
        for (name, cell) in &self.outputs {
            columns.insert(format!("output.{name}"), cell.table_value());
        }
        ResultRow { id: self.id, columns }
    }
}

#[derive(Default)]
struct State {
    offset: u64,
    lines: usize,
    entries: Vec<Entry>,
    by_id: HashMap<RecordId, usize>,
    by_tool: HashMap<String, Vec<usize>>,
}

impl State {
    fn push(&mut self, e: Entry) {
        let i = self.entries.len();
        self.by_id.insert(e.id, i);
        self.by_tool.entry(e.tool.clone()).or_default().push(i);
        self.entries.push(e);
    }

    fn last_id(&self) -> Option<RecordId> {
        self.entries.last().map(|e| e.id)
    }
}

pub struct ResultsDb {
    dir: PathBuf,
    log: PathBuf,
    state: Mutex<State>,
}

impl ResultsDb {
    /// Open (creating if needed) the database in `dir`.
    pub fn open(dir: impl Into<PathBuf>) -> Result<ResultsDb, DbError> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("payloads")).map_err(io_err(&dir))?;
        let db = ResultsDb {
            log: dir.join(LOG_FILE),
            dir,
            state: Mutex::new(State::default()),
        };
        db.refresh(&mut db.state.lock().expect("state lock"))?;
        Ok(db)
    }

    pub fn log_path(&self) -> &Path {
        &self.log
    }

    // Read any complete lines appended since the last refresh.
    fn refresh(&self, st: &mut State) -> Result<(), DbError> {
        let mut f = match File::open(&self.log) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(io_err(&self.log)(e)),
        };
        f.seek(SeekFrom::Start(st.offset)).map_err(io_err(&self.log))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(io_err(&self.log))?;
        let Some(end) = buf.iter().rposition(|&b| b == b'\n') else {
            return Ok(());
        };
        for line in buf[..end].split(|&b| b == b'\n') {
            st.lines += 1;
            let e: Entry = serde_json::from_slice(line).map_err(|err| DbError::Corrupt {
                line: st.lines,
                reason: err.to_string(),
            })?;
            st.push(e);
        }
        st.offset += end as u64 + 1;
        Ok(())
    }

    fn payload_path(&self, hex: &str) -> PathBuf {
        self.dir.join("payloads").join(&hex[..2]).join(format!("{hex}.json"))
    }

    fn put_payload(&self, v: &TypedValue) -> Result<String, DbError> {
        let bytes = canonical_json(&serde_json::to_value(v).expect("typed values serialize"));
        let hex = hex::encode(Sha256::digest(&bytes));
        let path = self.payload_path(&hex);
        if !path.exists() {
            let dir = path.parent().expect("payload dirs have a parent");
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let tmp = dir.join(format!(".{hex}.{}.tmp", Ulid::new()));
            fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
            fs::rename(&tmp, &path).map_err(io_err(&path))?;
        }
        Ok(format!("sha256:{hex}"))
    }

    fn get_payload(&self, reference: &str) -> Result<TypedValue, DbError> {
        let bad = |reason: String| DbError::Payload {
            digest: reference.to_string(),
            reason,
        };
        let hex = reference
            .strip_prefix("sha256:")
            .filter(|h| h.len() == 64)
            .ok_or_else(|| bad("malformed reference".into()))?;
        let bytes = fs::read(self.payload_path(hex)).map_err(|e| bad(e.to_string()))?;
        if hex::encode(Sha256::digest(&bytes)) != hex {
            return Err(bad("content does not match its digest".into()));
        }
        serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))
    }

    fn cells<'a>(
        &self,
        values: impl Iterator<Item = (&'a String, &'a TypedValue)>,
    ) -> Result<IndexMap<String, Cell>, DbError> {
        values
            .map(|(name, v)| {
                let cell = match v.kind() {
                    Kind::Array | Kind::List | Kind::Dictionary => Cell::Ref {
                        kind: v.kind(),
                        reference: self.put_payload(v)?,
                    },
                    _ => Cell::Value(v.clone()),
                };
                Ok((name.clone(), cell))
            })
            .collect()
    }

    fn resolve(&self, cells: &IndexMap<String, Cell>) -> Result<IndexMap<String, TypedValue>, DbError> {
        cells
            .iter()
            .map(|(name, cell)| {
                let v = match cell {
                    Cell::Value(v) => v.clone(),
                    Cell::Ref { reference, .. } => self.get_payload(reference)?,
                };
                Ok((name.clone(), v))
            })
            .collect()
    }

    /// Append one record. A record with a pending id is numbered here, after
    /// every stored id.
    pub fn save_record(&self, r: &RunRecord) -> Result<RecordId, DbError> {
        Ok(self.save_records(std::slice::from_ref(r))?[0])
    }

    /// Append several records under one lock and one flush.
    pub fn save_records(&self, records: &[RunRecord]) -> Result<Vec<RecordId>, DbError> {
        let mut st = self.state.lock().expect("state lock");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.log)
            .map_err(io_err(&self.log))?;
        f.lock().map_err(io_err(&self.log))?;
        self.refresh(&mut st)?;

        let mut last = st.last_id();
        let mut text = Vec::new();
        let mut fresh = Vec::with_capacity(records.len());
        for r in records {
            let id = if r.id.is_pending() {
                let now = Ulid::new();
                let id = match last {
                    Some(l) if now <= l.ulid() => l.ulid().increment().expect("ulid space exhausted"),
                    _ => now,
                };
                RecordId::from_ulid(id)
            } else if st.by_id.contains_key(&r.id) || fresh.iter().any(|e: &Entry| e.id == r.id) {
                return Err(DbError::DuplicateId(r.id));
            } else if last.is_some_and(|l| r.id <= l) {
                return Err(DbError::IdOutOfOrder(r.id));
            } else {
                r.id
            };
            last = Some(id);
            let e = Entry {
                id,
                tool: r.tool.clone(),
                revision: r.revision,
                cache_key: r.cache_key.clone(),
                status: r.status.clone(),
                started: r.started,
                finished: r.finished,
                cache_hit: r.cache_hit,
                steps: r.steps.clone(),
                inputs: self.cells(r.inputs.iter())?,
                outputs: self.cells(r.outputs.iter())?,
            };
            serde_json::to_writer(&mut text, &e).expect("entries serialize");
            text.push(b'\n');
            fresh.push(e);
        }
        f.write_all(&text).map_err(io_err(&self.log))?;
        f.sync_data().map_err(io_err(&self.log))?;
        drop(f);
        st.offset += text.len() as u64;
        st.lines += fresh.len();
        let ids = fresh.iter().map(|e| e.id).collect();
        for e in fresh {
            st.push(e);
        }
        Ok(ids)
    }

    pub fn fetch(&self, id: RecordId) -> Result<RunRecord, DbError> {
        let e = {
            let mut st = self.state.lock().expect("state lock");
            self.refresh(&mut st)?;
            let i = *st.by_id.get(&id).ok_or(DbError::NotFound(id))?;
            st.entries[i].clone()
        };
        Ok(RunRecord {
            id: e.id,
            tool: e.tool,
            revision: e.revision,
            cache_key: e.cache_key,
            inputs: self.resolve(&e.inputs)?.into_iter().collect(),
            outputs: self.resolve(&e.outputs)?,
            status: e.status,
            steps: e.steps,
            started: e.started,
            finished: e.finished,
            cache_hit: e.cache_hit,
        })
    }

    pub fn len(&self) -> Result<usize, DbError> {
        let mut st = self.state.lock().expect("state lock");
        self.refresh(&mut st)?;
        Ok(st.entries.len())
    }

    pub fn is_empty(&self) -> Result<bool, DbError> {
        Ok(self.len()? == 0)
    }

    /// Records matching `p`, newest first. Fields `input.*` and `output.*`
    /// are resolved against `schema`, which must describe the tool named by
    /// a `tool = <name>` atom; without one only `tool`, `revision` and
    /// `status` may be used. `fields` restricts the returned columns.
    pub fn query(
        &self,
        p: &QueryPredicate,
        schema: Option<&ToolManifest>,
        fields: Option<&[String]>,
        limit: Option<usize>,
    ) -> Result<Vec<ResultRow>, DbError> {
        let compiled = p.compile(schema)?;
        if let Some(fields) = fields {
            for f in fields {
                if !BASE_COLUMNS.contains(&f.as_str()) {
                    let known = match (f.strip_prefix("input."), f.strip_prefix("output."), schema) {
                        (Some(n), _, Some(m)) => m.inputs.contains_key(n),
                        (_, Some(n), Some(m)) => m.outputs.contains_key(n),
                        _ => false,
                    };
                    if !known {
                        return Err(DbError::UnknownField(f.clone()));
                    }
                }
            }
        }
        let mut st = self.state.lock().expect("state lock");
        self.refresh(&mut st)?;
        let all: Vec<usize>;
        let candidates: &[usize] = match &compiled.tool {
            Some(t) => st.by_tool.get(t).map(Vec::as_slice).unwrap_or(&[]),
            None => {
                all = (0..st.entries.len()).collect();
                &all
            }
        };
        let mut rows = Vec::new();
        for &i in candidates.iter().rev() {
            if limit.is_some_and(|n| rows.len() >= n) {
                break;
            }
            let e = &st.entries[i];
            if compiled.revision.is_some_and(|r| r != e.revision) || !compiled.matches(e) {
                continue;
            }
            let mut row = e.row();
            if let Some(fields) = fields {
                row.columns = fields
                    .iter()
                    .map(|f| (f.clone(), row.columns.get(f).cloned().unwrap_or(Value::Null)))
                    .collect();
            }
            rows.push(row);
        }
        Ok(rows)
    }

    /// One row per record of `m.name` (optionally a single revision), oldest
    /// first. Columns: record metadata, then every scalar input and output
    /// declared in `m`.
    pub fn summarize(&self, m: &ToolManifest, rev: Option<RevisionTag>) -> Result<Table, DbError> {
        let mut columns = vec![
            Column::new("id", ColumnKind::Text),
            Column::new("revision", ColumnKind::Text),
            Column::new("status", ColumnKind::Text),
            Column::new("started", ColumnKind::Text),
            Column::new("finished", ColumnKind::Text),
            Column::new("cache_hit", ColumnKind::Boolean),
        ];
        let column_kind = |k: Kind| match k {
            Kind::Boolean => ColumnKind::Boolean,
            Kind::Integer => ColumnKind::Integer,
            Kind::Number => ColumnKind::Number,
            Kind::Element => ColumnKind::Element,
            _ => ColumnKind::Text,
        };
        let scalar_inputs = m.inputs.iter().filter(|(_, s)| s.kind.is_scalar());
        let scalar_outputs = m.outputs.iter().filter(|(_, s)| s.kind.is_scalar());
        for (name, spec) in scalar_inputs {
            columns.push(Column {
                name: format!("input.{name}"),
                kind: column_kind(spec.kind),
                units: spec.units.as_ref().map(|u| u.as_str().to_string()),
            });
        }
        for (name, spec) in scalar_outputs {
            columns.push(Column {
                name: format!("output.{name}"),
                kind: column_kind(spec.kind),
                units: spec.units.as_ref().map(|u| u.as_str().to_string()),
            });
        }

        let mut st = self.state.lock().expect("state lock");
        self.refresh(&mut st)?;
        let idx = st.by_tool.get(&m.name).cloned().unwrap_or_default();
        let rows = idx
            .into_iter()
            .map(|i| &st.entries[i])
            .filter(|e| rev.is_none_or(|r| r == e.revision))
            .map(|e| {
                let row = e.row();
                columns
                    .iter()
                    .map(|c| row.columns.get(&c.name).cloned().unwrap_or(Value::Null))
                    .collect()
            })
            .collect();
        Ok(Table { columns, rows })
    }
}
