//! Content-addressed result cache.
//!
//! Entries live at `cache/<tool>/<rev>/<key[0:2]>/<key>/` and hold
//! `inputs.json` (canonical bytes), `outputs.json`, `meta.json` and an
//! `artifacts/` directory. Entries are written to a temporary directory and
//! renamed into place, so a reader either sees a whole entry or none.

mod canonical;

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use canonical::{canonical_f64, canonical_json, canonical_number};

use crate::manifest::RevisionTag;
use crate::values::{InputSet, TypedValue};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt cache entry {key}: {reason}")]
    CorruptEntry { key: CacheKey, reason: String },
    #[error("entry key {key} does not match its inputs (derived {derived})")]
    KeyMismatch { key: CacheKey, derived: CacheKey },
    #[error("'{tool}' is a dev revision; dev runs are never cached")]
    DevRevision { tool: String },
    #[error("artifact path '{0}' must be relative and stay inside the entry")]
    BadArtifactPath(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// SHA-256 of the canonical key material, as 64 lowercase hex digits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CacheKey(String);

impl CacheKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn from_digest(bytes: &[u8]) -> CacheKey {
        CacheKey(hex::encode(bytes))
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for CacheKey {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(CacheKey(s.to_string()))
        } else {
            Err(format!("'{s}' is not a 64-digit lowercase hex digest"))
        }
    }
}

impl TryFrom<String> for CacheKey {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<CacheKey> for String {
    fn from(k: CacheKey) -> String {
        k.0
    }
}

/// The JSON value hashed for an input set: canonical raw forms, with image
/// values replaced by `sha256:<hex>` of their bytes.
pub fn canonical_inputs(inputs: &InputSet) -> Value {
    Value::Object(
        inputs
            .iter()
            .map(|(name, v)| {
                let raw = match v {
                    TypedValue::Image(img) => Value::String(format!("sha256:{}", img.sha256)),
                    other => other.canonical_raw(|_| unreachable!("images handled above")),
                };
                (name.clone(), raw)
            })
            .collect(),
    )
}

/// Canonical bytes of an input set (the `inputs.json` of a cache entry).
pub fn canonical_inputs_bytes(inputs: &InputSet) -> Vec<u8> {
    canonical_json(&canonical_inputs(inputs))
}

/// Canonical bytes of an output map in stored form.
pub fn canonical_outputs_bytes(outputs: &IndexMap<String, TypedValue>) -> Vec<u8> {
    let value = serde_json::to_value(outputs).expect("typed values always serialize");
    canonical_json(&value)
}

fn key_from_bytes(tool: &str, rev: RevisionTag, inputs_bytes: &[u8]) -> CacheKey {
    let mut h = Sha256::new();
    h.update(format!("tool\n{tool}\nrev\n{rev}\n").as_bytes());
    h.update(inputs_bytes);
    CacheKey::from_digest(&h.finalize())
}

pub fn canonical_key(tool: &str, rev: RevisionTag, inputs: &InputSet) -> CacheKey {
    key_from_bytes(tool, rev, &canonical_inputs_bytes(inputs))
}

/// Where an entry lives: the key plus the tool and revision it was derived
/// from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheAddress {
    pub tool: String,
    pub rev: RevisionTag,
    pub key: CacheKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Meta {
    tool: String,
    revision: RevisionTag,
    key: CacheKey,
    created: DateTime<Utc>,
    record_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub address: CacheAddress,
    pub inputs_json: Vec<u8>,
    pub outputs_json: Vec<u8>,
    /// Relative path inside `artifacts/` → bytes.
    pub artifacts: Vec<(String, Vec<u8>)>,
    pub created: DateTime<Utc>,
    pub record_id: String,
}

impl CacheEntry {
    /// Parse `outputs.json` back into typed values.
    pub fn outputs(&self) -> Result<IndexMap<String, TypedValue>, serde_json::Error> {
        serde_json::from_slice(&self.outputs_json)
    }
}

#[derive(Debug, Clone)]
pub struct Cache {
    root: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Cache {
        Cache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_dir(&self, addr: &CacheAddress) -> PathBuf {
        let k = addr.key.as_str();
        self.root
            .join(&addr.tool)
            .join(addr.rev.to_string())
            .join(&k[..2])
            .join(k)
    }

    /// Returns the entry stored at `addr`, if any. Reading never mutates the
    /// store.
    pub fn lookup(&self, addr: &CacheAddress) -> Result<Option<CacheEntry>, CacheError> {
        let dir = self.entry_dir(addr);
        if !dir.is_dir() {
            return Ok(None);
        }
        let corrupt = |reason: String| CacheError::CorruptEntry {
            key: addr.key.clone(),
            reason,
        };
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| corrupt(format!("cannot read {name}: {e}")))
        };
        let inputs_json = read("inputs.json")?;
        let derived = key_from_bytes(&addr.tool, addr.rev, &inputs_json);
        if derived != addr.key {
            return Err(corrupt(format!("inputs.json re-derives key {derived}")));
        }
        let outputs_json = read("outputs.json")?;
        let meta: Meta = serde_json::from_slice(&read("meta.json")?)
            .map_err(|e| corrupt(format!("meta.json: {e}")))?;
        if meta.key != addr.key || meta.tool != addr.tool || meta.revision != addr.rev {
            return Err(corrupt("meta.json names a different entry".into()));
        }
        let mut artifacts = Vec::new();
        let art_dir = dir.join("artifacts");
        if art_dir.is_dir() {
            collect_files(&art_dir, &art_dir, &mut artifacts)
                .map_err(|e| corrupt(format!("artifacts: {e}")))?;
        }
        artifacts.sort();
        Ok(Some(CacheEntry {
            address: addr.clone(),
            inputs_json,
            outputs_json,
            artifacts,
            created: meta.created,
            record_id: meta.record_id,
        }))
    }

    /// Store `entry`. Returns `false` when an entry with the same key already
    /// exists (the first writer wins and later writes are discarded).
    pub fn store(&self, entry: &CacheEntry) -> Result<bool, CacheError> {
        let addr = &entry.address;
        if addr.rev.is_dev() {
            return Err(CacheError::DevRevision {
                tool: addr.tool.clone(),
            });
        }
        let derived = key_from_bytes(&addr.tool, addr.rev, &entry.inputs_json);
        if derived != addr.key {
            return Err(CacheError::KeyMismatch {
                key: addr.key.clone(),
                derived,
            });
        }
        for (rel, _) in &entry.artifacts {
            let p = Path::new(rel);
            if p.is_absolute()
                || p.components().any(|c| !matches!(c, std::path::Component::Normal(_)))
            {
                return Err(CacheError::BadArtifactPath(rel.clone()));
            }
        }

        let final_dir = self.entry_dir(addr);
        if final_dir.is_dir() {
            return Ok(false);
        }
        let parent = final_dir.parent().expect("entry dirs have a parent");
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        let tmp = parent.join(format!(
            ".tmp-{}-{}-{}",
            addr.key,
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let result = write_entry(&tmp, entry).and_then(|()| match fs::rename(&tmp, &final_dir) {
            Ok(()) => Ok(true),
            // Another writer committed first.
            Err(_) if final_dir.is_dir() => Ok(false),
            Err(e) => Err(CacheError::Io {
                path: final_dir.clone(),
                source: e,
            }),
        });
        if tmp.exists() {
            let _ = fs::remove_dir_all(&tmp);
        }
        result
    }
}

fn write_entry(tmp: &Path, entry: &CacheEntry) -> Result<(), CacheError> {
    let art = tmp.join("artifacts");
    fs::create_dir_all(&art).map_err(io_err(&art))?;
    let meta = Meta {
        tool: entry.address.tool.clone(),
        revision: entry.address.rev,
        key: entry.address.key.clone(),
        created: entry.created,
        record_id: entry.record_id.clone(),
    };
    let meta_bytes = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    for (name, bytes) in [
        ("inputs.json", &entry.inputs_json),
        ("outputs.json", &entry.outputs_json),
        ("meta.json", &meta_bytes),
    ] {
        let p = tmp.join(name);
        write_synced(&p, bytes)?;
    }
    for (rel, bytes) in &entry.artifacts {
        let p = art.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        write_synced(&p, bytes)?;
    }
    Ok(())
}

fn write_synced(p: &Path, bytes: &[u8]) -> Result<(), CacheError> {
    use std::io::Write;
    let mut f = fs::File::create(p).map_err(io_err(p))?;
    f.write_all(bytes).map_err(io_err(p))?;
    f.sync_all().map_err(io_err(p))
}

fn collect_files(base: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(base, &path, out)?;
        } else {
            let rel = path.strip_prefix(base).expect("inside base");
            let rel = rel.to_string_lossy().replace('\\', "/");
            out.push((rel, fs::read(&path)?));
        }
    }
    Ok(())
}
