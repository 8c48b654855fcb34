//! Tool execution: validation, cache consultation, isolated run
//! directories, step execution and output collection.
//!
//! Run protocol: the run directory holds the bundle's `files`, an
//! `inputs.json` with the canonical raw form of every input, an `_outputs/`
//! directory where each step writes `<name>.json` envelopes, and `_logs/`
//! with each step's stdout and stderr. Steps see the directory's absolute
//! path in `FAIRFLOW_RUN_DIR`.

mod local;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::Utc;
use indexmap::IndexMap;
use serde_json::Value;
use thiserror::Error;
use ulid::Ulid;

pub use local::{LocalVenue, RUN_DIR_ENV};

use crate::cache::{
    canonical_inputs_bytes, canonical_key, canonical_outputs_bytes, Cache, CacheAddress, CacheEntry, CacheError,
};
use crate::manifest::{RevisionTag, ToolManifest};
use crate::record::{RecordId, RunRecord, RunStatus, StepResult};
use crate::registry::{Registry, RegistryError, ResolvedTool};
use crate::resultsdb::{DbError, QueryPredicate, ResultRow, ResultsDb, Table};
use crate::values::{
    build_input_set_in, image_input_path, validate_output, InputSet, TypedValue, ValidationContext, ValueError,
};

pub const DEFAULT_TIME_LIMIT: Duration = Duration::from_secs(3600);

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Validation(#[from] ValueError),
    #[error("step '{step}' failed with {}{}", exit_text(*exit_code), tail_text(stderr_tail))]
    StepFailed {
        step: String,
        exit_code: Option<i32>,
        stderr_tail: String,
    },
    #[error("step '{step}' exceeded its time limit of {seconds} s and was terminated")]
    Timeout { step: String, seconds: f64 },
    #[error("declared outputs were not produced: {}", .0.join(", "))]
    OutputMissing(Vec<String>),
    #[error("output '{name}' is invalid: {reason}")]
    OutputInvalid { name: String, reason: String },
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid run request: {0}")]
    InvalidRequest(String),
}

fn exit_text(code: Option<i32>) -> String {
    match code {
        Some(c) => format!("exit code {c}"),
        None => "no exit code (terminated by a signal or not started)".into(),
    }
}

fn tail_text(tail: &str) -> String {
    if tail.is_empty() {
        String::new()
    } else {
        format!("; stderr:\n{tail}")
    }
}

impl RunError {
    /// The class recorded in a failed run's status.
    pub fn class(&self) -> &'static str {
        match self {
            RunError::Registry(_) => "RegistryError",
            RunError::Validation(_) => "ValidationError",
            RunError::StepFailed { .. } => "StepFailed",
            RunError::Timeout { .. } => "Timeout",
            RunError::OutputMissing(_) => "OutputMissing",
            RunError::OutputInvalid { .. } => "OutputInvalid",
            RunError::Cache(_) => "CacheError",
            RunError::Db(_) => "DatabaseError",
            RunError::Io { .. } => "IOError",
            RunError::InvalidRequest(_) => "InvalidRequest",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where steps execute. The engine ships one implementation,
/// [`LocalVenue`].
pub trait Venue: Send + Sync {
    /// Run the steps of `m` in `dir`, stopping at the first failure. Returns
    /// the results of every step started, and the failure if there was one.
    fn execute(&self, m: &ToolManifest, dir: &Path, limit: Duration) -> (Vec<StepResult>, Option<RunError>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CachePolicy {
    #[default]
    Use,
    BypassRead,
    BypassWrite,
    BypassBoth,
}

impl CachePolicy {
    pub fn reads(self) -> bool {
        matches!(self, CachePolicy::Use | CachePolicy::BypassWrite)
    }

    pub fn writes(self) -> bool {
        matches!(self, CachePolicy::Use | CachePolicy::BypassRead)
    }
}

impl std::str::FromStr for CachePolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "use" => Ok(CachePolicy::Use),
            "bypass-read" => Ok(CachePolicy::BypassRead),
            "bypass-write" => Ok(CachePolicy::BypassWrite),
            "bypass" | "bypass-both" => Ok(CachePolicy::BypassBoth),
            _ => Err(format!(
                "unknown cache policy '{s}' (use, bypass, bypass-read, bypass-write, bypass-both)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunRequest {
    pub tool: String,
    pub revision: Option<RevisionTag>,
    /// Raw input values; file references resolve against the current
    /// directory.
    pub overrides: IndexMap<String, Value>,
    pub cache: CachePolicy,
    pub time_limit: Duration,
}

impl RunRequest {
    pub fn new(tool: impl Into<String>) -> RunRequest {
        RunRequest {
            tool: tool.into(),
            revision: None,
            overrides: IndexMap::new(),
            cache: CachePolicy::Use,
            time_limit: DEFAULT_TIME_LIMIT,
        }
    }

    pub fn set(mut self, name: &str, value: impl Into<Value>) -> RunRequest {
        self.overrides.insert(name.to_string(), value.into());
        self
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    /// The run directory, or the cache entry for a cache hit.
    pub dir: PathBuf,
}

/// Create a fresh run directory under `base`: the bundle's `files` copied
/// from `bundle_root`, image inputs under `_inputs/`, `inputs.json`, and
/// empty `_outputs/` and `_logs/`.
pub fn prepare_run_dir(
    m: &ToolManifest,
    inputs: &InputSet,
    base: &Path,
    bundle_root: &Path,
) -> Result<PathBuf, RunError> {
    fs::create_dir_all(base).map_err(io_err(base))?;
    let base = base.canonicalize().map_err(io_err(base))?;
    let dir = base.join(Ulid::new().to_string());
    fs::create_dir(&dir).map_err(io_err(&dir))?;
    for rel in &m.files {
        let dest = dir.join(rel);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::copy(bundle_root.join(rel), &dest).map_err(io_err(&dest))?;
    }
    for (name, v) in inputs.iter() {
        if let TypedValue::Image(img) = v {
            let dest = dir.join(image_input_path(name, img));
            let data = img.data().ok_or_else(|| RunError::InvalidRequest(format!("image input '{name}' has no data")))?;
            fs::create_dir_all(dest.parent().expect("under the run dir")).map_err(io_err(&dest))?;
            fs::write(&dest, data).map_err(io_err(&dest))?;
        }
    }
    let inputs_path = dir.join("inputs.json");
    let mut text = serde_json::to_vec_pretty(&inputs.to_raw_json()).expect("inputs serialize");
    text.push(b'\n');
    fs::write(&inputs_path, text).map_err(io_err(&inputs_path))?;
    for sub in ["_outputs", "_logs"] {
        fs::create_dir(dir.join(sub)).map_err(io_err(&dir))?;
    }
    Ok(dir)
}

/// Run the steps of `m` in `dir` with the local venue.
pub fn execute_steps(m: &ToolManifest, dir: &Path, limit: Duration) -> Result<Vec<StepResult>, RunError> {
    match LocalVenue.execute(m, dir, limit) {
        (results, None) => Ok(results),
        (_, Some(e)) => Err(e),
    }
}

/// Read and validate `_outputs/<name>.json` for every declared output.
/// Undeclared files in `_outputs/` are ignored with a warning.
pub fn collect_outputs(m: &ToolManifest, dir: &Path) -> Result<IndexMap<String, TypedValue>, RunError> {
    let out_dir = dir.join("_outputs");
    let missing: Vec<String> = m
        .outputs
        .keys()
        .filter(|name| !out_dir.join(format!("{name}.json")).is_file())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(RunError::OutputMissing(missing));
    }
    if let Ok(entries) = fs::read_dir(&out_dir) {
        for e in entries.flatten() {
            let file = e.file_name().to_string_lossy().into_owned();
            if let Some(stem) = file.strip_suffix(".json") {
                if !m.outputs.contains_key(stem) {
                    log::warn!("ignoring undeclared output file _outputs/{file}");
                }
            }
        }
    }
    let ctx = ValidationContext::with_base_dir(&out_dir);
    let mut outputs = IndexMap::with_capacity(m.outputs.len());
    for (name, spec) in &m.outputs {
        let invalid = |reason: String| RunError::OutputInvalid {
            name: name.clone(),
            reason,
        };
        let path = out_dir.join(format!("{name}.json"));
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let envelope: Value = serde_json::from_slice(&bytes).map_err(|e| invalid(format!("not JSON: {e}")))?;
        let value = validate_output(spec, &envelope, &ctx).map_err(|e| invalid(e.to_string()))?;
        outputs.insert(name.clone(), value);
    }
    Ok(outputs)
}

/// The engine: registry, cache and results database under one home
/// directory (`registry/`, `cache/`, `results/`, `runs/`).
pub struct Engine {
    home: PathBuf,
    registry: Registry,
    cache: Cache,
    db: ResultsDb,
    venue: Box<dyn Venue>,
}

impl Engine {
    pub fn open(home: impl Into<PathBuf>) -> Result<Engine, RunError> {
        Engine::with_venue(home, Box::new(LocalVenue))
    }

    pub fn with_venue(home: impl Into<PathBuf>, venue: Box<dyn Venue>) -> Result<Engine, RunError> {
        let home = home.into();
        fs::create_dir_all(&home).map_err(io_err(&home))?;
        Ok(Engine {
            registry: Registry::open(home.join("registry"))?,
            cache: Cache::new(home.join("cache")),
            db: ResultsDb::open(home.join("results"))?,
            home,
            venue,
        })
    }

    pub fn home(&self) -> &Path {
        &self.home
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    pub fn db(&self) -> &ResultsDb {
        &self.db
    }

    /// Resolve the tool and validate `overrides` over its defaults. File
    /// references in overrides resolve against the current directory, those
    /// in defaults against the bundle.
    pub fn validate(
        &self,
        tool: &str,
        rev: Option<RevisionTag>,
        overrides: &IndexMap<String, Value>,
    ) -> Result<(ResolvedTool, InputSet), RunError> {
        let resolved = self.registry.search_tool(tool, rev)?;
        let inputs = build_input_set_in(
            &resolved.manifest,
            overrides,
            &ValidationContext::default(),
            &ValidationContext::with_base_dir(&resolved.root),
        )?;
        Ok((resolved, inputs))
    }

    pub fn run(&self, req: &RunRequest) -> Result<RunOutcome, RunError> {
        if req.time_limit.is_zero() {
            return Err(RunError::InvalidRequest("the wall-time limit must be positive".into()));
        }
        let (tool, inputs) = self.validate(&req.tool, req.revision, &req.overrides)?;
        let m = &tool.manifest;
        let addr = CacheAddress {
            tool: tool.name.clone(),
            rev: tool.revision,
            key: canonical_key(&tool.name, tool.revision, &inputs),
        };
        let cacheable = !tool.revision.is_dev();

        if cacheable && req.cache.reads() {
            if let Some(entry) = self.cache.lookup(&addr)? {
                let mut stored = entry.outputs().map_err(|e| CacheError::CorruptEntry {
                    key: addr.key.clone(),
                    reason: format!("outputs.json: {e}"),
                })?;
                // stored in canonical key order; restore declaration order
                let outputs: IndexMap<String, TypedValue> = m
                    .outputs
                    .keys()
                    .filter_map(|n| stored.shift_remove(n).map(|v| (n.clone(), v)))
                    .collect();
                if outputs.len() != m.outputs.len() || !stored.is_empty() {
                    return Err(CacheError::CorruptEntry {
                        key: addr.key.clone(),
                        reason: "outputs.json does not match the declared outputs".into(),
                    }
                    .into());
                }
                let now = Utc::now();
                let mut record = RunRecord {
                    id: RecordId::PENDING,
                    tool: tool.name.clone(),
                    revision: tool.revision,
                    cache_key: addr.key.clone(),
                    inputs,
                    outputs,
                    status: RunStatus::Completed,
                    steps: Vec::new(),
                    started: now,
                    finished: now,
                    cache_hit: true,
                };
                record.id = self.db.save_record(&record)?;
                return Ok(RunOutcome {
                    record,
                    dir: self.cache.entry_dir(&addr),
                });
            }
        }

        let started = Utc::now();
        let dir = prepare_run_dir(m, &inputs, &self.home.join("runs"), &tool.root)?;
        let (steps, failure) = self.venue.execute(m, &dir, req.time_limit);
        let collected = match failure {
            Some(e) => Err(e),
            None => collect_outputs(m, &dir),
        };
        let mut record = RunRecord {
            id: RecordId::PENDING,
            tool: tool.name.clone(),
            revision: tool.revision,
            cache_key: addr.key.clone(),
            inputs,
            outputs: IndexMap::new(),
            status: RunStatus::Completed,
            steps,
            started,
            finished: Utc::now(),
            cache_hit: false,
        };
        match collected {
            Err(e) => {
                record.status = RunStatus::Failed(e.class().to_string());
                let id = self.db.save_record(&record)?;
                log::info!("recorded failed run {id} in {}", dir.display());
                Err(e)
            }
            Ok(outputs) => {
                record.outputs = outputs;
                record.id = self.db.save_record(&record)?;
                if cacheable && req.cache.writes() {
                    let entry = self.cache_entry(addr, &record, &dir)?;
                    if let Err(e) = self.cache.store(&entry) {
                        log::warn!("run {} completed but was not cached: {e}", record.id);
                    }
                }
                Ok(RunOutcome { record, dir })
            }
        }
    }

    fn cache_entry(&self, address: CacheAddress, record: &RunRecord, dir: &Path) -> Result<CacheEntry, RunError> {
        let mut artifacts = Vec::new();
        for (name, v) in &record.outputs {
            if let TypedValue::Image(img) = v {
                let data = img.data().expect("collected images carry their bytes");
                artifacts.push((format!("_outputs/{name}.{}", img.format.extension()), data.to_vec()));
            }
        }
        for step in &record.steps {
            for ext in ["out", "err"] {
                let rel = format!("_logs/{}.{ext}", step.name);
                let path = dir.join(&rel);
                artifacts.push((rel, fs::read(&path).map_err(io_err(&path))?));
            }
        }
        Ok(CacheEntry {
            address,
            inputs_json: canonical_inputs_bytes(&record.inputs),
            outputs_json: canonical_outputs_bytes(&record.outputs),
            artifacts,
            created: record.finished,
            record_id: record.id.to_string(),
        })
    }

    /// Query the results database, resolving `input.*` and `output.*` fields
    /// against the manifest of the tool the predicate names.
    pub fn query(
        &self,
        p: &QueryPredicate,
        fields: Option<&[String]>,
        limit: Option<usize>,
    ) -> Result<Vec<ResultRow>, RunError> {
        let schema = match p.tool() {
            Some(tool) => match self.registry.search_tool(tool, None) {
                Ok(t) => Some(t.manifest),
                Err(RegistryError::ToolNotFound(_)) => None,
                Err(e) => return Err(e.into()),
            },
            None => None,
        };
        Ok(self.db.query(p, schema.as_ref(), fields, limit)?)
    }

    /// One row per recorded run of `tool`.
    pub fn summary(&self, tool: &str, rev: Option<RevisionTag>) -> Result<Table, RunError> {
        let resolved = self.registry.search_tool(tool, rev)?;
        Ok(self.db.summarize(&resolved.manifest, rev)?)
    }
}

#[cfg(test)]
mod tests;
