//! Provenance records of tool executions.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use ulid::Ulid;

use crate::cache::CacheKey;
use crate::manifest::RevisionTag;
use crate::values::{InputSet, TypedValue};

/// Sortable unique record id (ULID text form).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RecordId(Ulid);

impl RecordId {
    /// Placeholder for a record the results database has not numbered yet.
    pub const PENDING: RecordId = RecordId(Ulid::nil());

    pub fn is_pending(self) -> bool {
        self.0.is_nil()
    }

    pub(crate) fn from_ulid(u: Ulid) -> RecordId {
        RecordId(u)
    }

    pub(crate) fn ulid(self) -> Ulid {
        self.0
    }
}

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for RecordId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ulid::from_string(s)
            .map(RecordId)
            .map_err(|e| format!("invalid record id '{s}': {e}"))
    }
}

impl TryFrom<String> for RecordId {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<RecordId> for String {
    fn from(id: RecordId) -> String {
        id.to_string()
    }
}

/// `completed`, or `failed:<error class>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RunStatus {
    Completed,
    Failed(String),
}

impl RunStatus {
    pub fn is_completed(&self) -> bool {
        *self == RunStatus::Completed
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Completed => f.write_str("completed"),
            RunStatus::Failed(class) => write!(f, "failed:{class}"),
        }
    }
}

impl FromStr for RunStatus {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "completed" => Ok(RunStatus::Completed),
            _ => match s.strip_prefix("failed:") {
                Some(class) if !class.is_empty() => Ok(RunStatus::Failed(class.to_string())),
                _ => Err(format!("invalid run status '{s}'")),
            },
        }
    }
}

impl TryFrom<String> for RunStatus {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<RunStatus> for String {
    fn from(s: RunStatus) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub name: String,
    /// `None` when the process was killed by a signal.
    pub exit_code: Option<i32>,
    pub duration: Duration,
    pub stdout_len: u64,
    pub stdout_sha256: String,
    pub stderr_len: u64,
    pub stderr_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: RecordId,
    pub tool: String,
    pub revision: RevisionTag,
    pub cache_key: CacheKey,
    pub inputs: InputSet,
    pub outputs: IndexMap<String, TypedValue>,
    pub status: RunStatus,
    pub steps: Vec<StepResult>,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub cache_hit: bool,
}
