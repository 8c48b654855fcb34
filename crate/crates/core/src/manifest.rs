//! Tool manifests (`tool.yaml`).
//!
//! A manifest declares a tool's identity, its typed inputs and outputs, the
//! auxiliary files copied into every run directory, and the workflow steps.
//! Parsing is strict: unknown keys, attributes that do not apply to a kind,
//! inverted bounds and defaults that fail validation are all errors.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::num::NonZeroU32;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::{parse_unit, ElementProperty, UnitExpr};
use crate::values::{self, ValidationContext};

pub const MANIFEST_FILE: &str = "tool.yaml";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("malformed manifest: {0}")]
    Syntax(String),
    #[error("{at}: {reason}")]
    Schema { at: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn schema(at: impl Into<String>, reason: impl Into<String>) -> ManifestError {
    ManifestError::Schema {
        at: at.into(),
        reason: reason.into(),
    }
}

/// The ten value kinds shared by inputs and outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Kind {
    Boolean,
    Integer,
    Number,
    Array,
    Text,
    Choice,
    List,
    Dictionary,
    Image,
    Element,
}

impl Kind {
    pub const ALL: [Kind; 10] = [
        Kind::Boolean,
        Kind::Integer,
        Kind::Number,
        Kind::Array,
        Kind::Text,
        Kind::Choice,
        Kind::List,
        Kind::Dictionary,
        Kind::Image,
        Kind::Element,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Boolean => "Boolean",
            Kind::Integer => "Integer",
            Kind::Number => "Number",
            Kind::Array => "Array",
            Kind::Text => "Text",
            Kind::Choice => "Choice",
            Kind::List => "List",
            Kind::Dictionary => "Dictionary",
            Kind::Image => "Image",
            Kind::Element => "Element",
        }
    }

    pub fn allows_units(self) -> bool {
        matches!(self, Kind::Number | Kind::Array)
    }

    pub fn allows_bounds(self) -> bool {
        matches!(self, Kind::Integer | Kind::Number)
    }

    /// Kinds whose values flatten to a single result-table cell.
    pub fn is_scalar(self) -> bool {
        matches!(
            self,
            Kind::Boolean | Kind::Integer | Kind::Number | Kind::Text | Kind::Choice | Kind::Element
        )
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, Kind::Integer | Kind::Number)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Kind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown type '{s}'"))
    }
}

/// `dev` (mutable working copy) or `r<N>` (immutable published revision).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RevisionTag {
    Dev,
    Published(NonZeroU32),
}

impl RevisionTag {
    pub fn published(n: u32) -> Option<Self> {
        NonZeroU32::new(n).map(RevisionTag::Published)
    }

    pub fn number(self) -> Option<u32> {
        match self {
            RevisionTag::Dev => None,
            RevisionTag::Published(n) => Some(n.get()),
        }
    }

    pub fn is_dev(self) -> bool {
        self == RevisionTag::Dev
    }
}

impl fmt::Display for RevisionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RevisionTag::Dev => f.write_str("dev"),
            RevisionTag::Published(n) => write!(f, "r{n}"),
        }
    }
}

impl FromStr for RevisionTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "dev" {
            return Ok(RevisionTag::Dev);
        }
        s.strip_prefix('r')
            .filter(|digits| !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|digits| digits.parse::<NonZeroU32>().ok())
            .map(RevisionTag::Published)
            .ok_or_else(|| format!("invalid revision '{s}' (expected 'dev' or 'r<N>' with N >= 1)"))
    }
}

impl Serialize for RevisionTag {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RevisionTag {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputSpec {
    pub kind: Kind,
    pub description: String,
    /// Default value in raw form, as written in the manifest.
    pub default: Option<serde_json::Value>,
    pub units: Option<UnitExpr>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub options: Option<Vec<String>>,
    pub property: Option<ElementProperty>,
}

impl InputSpec {
    pub fn new(kind: Kind) -> Self {
        InputSpec {
            kind,
            description: String::new(),
            default: None,
            units: None,
            min: None,
            max: None,
            options: None,
            property: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub kind: Kind,
    pub description: String,
    pub units: Option<UnitExpr>,
}

impl OutputSpec {
    pub fn new(kind: Kind) -> Self {
        OutputSpec {
            kind,
            description: String::new(),
            units: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowStep {
    pub name: String,
    pub command: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_seconds: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolManifest {
    pub name: String,
    pub revision: RevisionTag,
    pub description: String,
    pub inputs: IndexMap<String, InputSpec>,
    pub outputs: IndexMap<String, OutputSpec>,
    pub files: Vec<String>,
    pub steps: Vec<WorkflowStep>,
}

// On-disk shapes. Field order here fixes the key order of serialized output.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    name: String,
    #[serde(default = "dev")]
    revision: String,
    description: String,
    #[serde(default)]
    inputs: IndexMap<String, RawVariable>,
    #[serde(default)]
    outputs: IndexMap<String, RawVariable>,
    #[serde(default)]
    files: Vec<String>,
    steps: Vec<WorkflowStep>,
}

fn dev() -> String {
    "dev".to_string()
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVariable {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<serde_yaml::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    units: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    property: Option<String>,
}

pub fn is_tool_name(s: &str) -> bool {
    let b = s.as_bytes();
    !b.is_empty()
        && b.len() <= 64
        && b[0].is_ascii_lowercase()
        && b[1..]
            .iter()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || *c == b'_')
}

pub fn is_identifier(s: &str) -> bool {
    let b = s.as_bytes();
    !b.is_empty()
        && (b[0].is_ascii_alphabetic() || b[0] == b'_')
        && b.iter().all(|c| c.is_ascii_alphanumeric() || *c == b'_')
}

/// `Ok` when `path` is relative and has no `..` or root components.
pub fn check_relative_path(path: &str) -> Result<(), String> {
    if path.is_empty() {
        return Err("empty path".into());
    }
    for c in Path::new(path).components() {
        match c {
            Component::Normal(_) | Component::CurDir => {}
            Component::ParentDir => return Err(format!("'{path}' contains a '..' segment")),
            Component::RootDir | Component::Prefix(_) => {
                return Err(format!("'{path}' is not a relative path"))
            }
        }
    }
    Ok(())
}

pub fn parse_manifest(document: &[u8]) -> Result<ToolManifest, ManifestError> {
    // going through Value rejects duplicate mapping keys
    let tree: serde_yaml::Value =
        serde_yaml::from_slice(document).map_err(|e| ManifestError::Syntax(e.to_string()))?;
    let raw: RawManifest =
        serde_yaml::from_value(tree).map_err(|e| ManifestError::Syntax(e.to_string()))?;

    if !is_tool_name(&raw.name) {
        return Err(schema("name", format!("'{}' does not match [a-z][a-z0-9_]{{0,63}}", raw.name)));
    }
    let revision = raw
        .revision
        .parse::<RevisionTag>()
        .map_err(|e| schema("revision", e))?;

    let mut inputs = IndexMap::with_capacity(raw.inputs.len());
    for (name, var) in raw.inputs {
        let at = format!("inputs.{name}");
        if !is_identifier(&name) {
            return Err(schema(at, "input names must match [A-Za-z_][A-Za-z0-9_]*"));
        }
        let spec = input_spec(&at, var)?;
        inputs.insert(name, spec);
    }

    let mut outputs = IndexMap::with_capacity(raw.outputs.len());
    for (name, var) in raw.outputs {
        let at = format!("outputs.{name}");
        if !is_identifier(&name) {
            return Err(schema(at, "output names must match [A-Za-z_][A-Za-z0-9_]*"));
        }
        let spec = output_spec(&at, var)?;
        outputs.insert(name, spec);
    }

    let mut seen = HashSet::new();
    for (i, f) in raw.files.iter().enumerate() {
        check_relative_path(f).map_err(|e| schema(format!("files[{i}]"), e))?;
        if !seen.insert(f) {
            return Err(schema(format!("files[{i}]"), format!("'{f}' listed twice")));
        }
    }

    if raw.steps.is_empty() {
        return Err(schema("steps", "at least one workflow step is required"));
    }
    let mut step_names = HashSet::new();
    for (i, step) in raw.steps.iter().enumerate() {
        let at = format!("steps[{i}]");
        if !is_identifier(&step.name) {
            return Err(schema(at, format!("step name '{}' is not an identifier", step.name)));
        }
        if !step_names.insert(step.name.as_str()) {
            return Err(schema(at, format!("duplicate step name '{}'", step.name)));
        }
        if step.command.is_empty() || step.command[0].is_empty() {
            return Err(schema(at, "command must name a program"));
        }
        if step.timeout_seconds == Some(0) {
            return Err(schema(at, "timeout_seconds must be positive"));
        }
    }

    Ok(ToolManifest {
        name: raw.name,
        revision,
        description: raw.description,
        inputs,
        outputs,
        files: raw.files,
        steps: raw.steps,
    })
}

fn parse_kind(at: &str, s: &str) -> Result<Kind, ManifestError> {
    s.parse().map_err(|e: String| schema(format!("{at}.type"), e))
}

fn illegal(at: &str, attr: &str, kind: Kind) -> ManifestError {
    schema(format!("{at}.{attr}"), format!("'{attr}' is not allowed for {kind}"))
}

fn parse_units(at: &str, units: Option<String>, kind: Kind) -> Result<Option<UnitExpr>, ManifestError> {
    match units {
        None => Ok(None),
        Some(_) if !kind.allows_units() => Err(illegal(at, "units", kind)),
        Some(u) => parse_unit(&u)
            .map(Some)
            .map_err(|e| schema(format!("{at}.units"), e.to_string())),
    }
}

fn input_spec(at: &str, var: RawVariable) -> Result<InputSpec, ManifestError> {
    let kind = parse_kind(at, &var.kind)?;
    let units = parse_units(at, var.units, kind)?;
    if !kind.allows_bounds() {
        if var.min.is_some() {
            return Err(illegal(at, "min", kind));
        }
        if var.max.is_some() {
            return Err(illegal(at, "max", kind));
        }
    }
    for (attr, bound) in [("min", var.min), ("max", var.max)] {
        if bound.is_some_and(|b| !b.is_finite()) {
            return Err(schema(format!("{at}.{attr}"), "bound must be finite"));
        }
    }
    if let (Some(lo), Some(hi)) = (var.min, var.max) {
        if lo > hi {
            return Err(schema(at, format!("min ({lo}) is greater than max ({hi})")));
        }
    }
    match (&var.options, kind) {
        (Some(_), k) if k != Kind::Choice => return Err(illegal(at, "options", kind)),
        (None, Kind::Choice) => return Err(schema(format!("{at}.options"), "Choice requires options")),
        (Some(opts), _) if opts.is_empty() => {
            return Err(schema(format!("{at}.options"), "options must not be empty"))
        }
        (Some(opts), _) => {
            let mut seen = HashSet::new();
            if let Some(dup) = opts.iter().find(|o| !seen.insert(*o)) {
                return Err(schema(format!("{at}.options"), format!("duplicate option '{dup}'")));
            }
        }
        _ => {}
    }
    let property = match (var.property, kind) {
        (None, _) => None,
        (Some(_), k) if k != Kind::Element => return Err(illegal(at, "property", kind)),
        (Some(p), _) => Some(
            p.parse::<ElementProperty>()
                .map_err(|e| schema(format!("{at}.property"), e))?,
        ),
    };
    let default = var
        .value
        .map(|v| serde_json::to_value(v).map_err(|e| schema(format!("{at}.value"), e.to_string())))
        .transpose()?;

    let spec = InputSpec {
        kind,
        description: var.description,
        default,
        units,
        min: var.min,
        max: var.max,
        options: var.options,
        property,
    };
    if let Some(default) = &spec.default {
        // file-backed defaults are resolved against the bundle at load time
        if !values::is_file_reference(default) {
            values::validate_value(&spec, default, &ValidationContext::default())
                .map_err(|e| schema(format!("{at}.value"), e.to_string()))?;
        }
    }
    Ok(spec)
}

fn output_spec(at: &str, var: RawVariable) -> Result<OutputSpec, ManifestError> {
    let kind = parse_kind(at, &var.kind)?;
    let units = parse_units(at, var.units, kind)?;
    for (attr, present) in [
        ("value", var.value.is_some()),
        ("min", var.min.is_some()),
        ("max", var.max.is_some()),
        ("options", var.options.is_some()),
        ("property", var.property.is_some()),
    ] {
        if present {
            return Err(schema(format!("{at}.{attr}"), format!("'{attr}' is not allowed on outputs")));
        }
    }
    Ok(OutputSpec {
        kind,
        description: var.description,
        units,
    })
}

fn raw_input(spec: &InputSpec) -> RawVariable {
    RawVariable {
        kind: spec.kind.name().to_string(),
        description: spec.description.clone(),
        value: spec
            .default
            .as_ref()
            .map(|v| serde_yaml::to_value(v).expect("JSON values are representable in YAML")),
        units: spec.units.as_ref().map(|u| u.as_str().to_string()),
        min: spec.min,
        max: spec.max,
        options: spec.options.clone(),
        property: spec.property.map(|p| p.name().to_string()),
    }
}

fn raw_output(spec: &OutputSpec) -> RawVariable {
    RawVariable {
        kind: spec.kind.name().to_string(),
        description: spec.description.clone(),
        units: spec.units.as_ref().map(|u| u.as_str().to_string()),
        ..RawVariable::default()
    }
}

/// Deterministic YAML rendering; re-parses to an equal manifest.
pub fn serialize_manifest(m: &ToolManifest) -> Vec<u8> {
    let raw = RawManifest {
        name: m.name.clone(),
        revision: m.revision.to_string(),
        description: m.description.clone(),
        inputs: m.inputs.iter().map(|(k, v)| (k.clone(), raw_input(v))).collect(),
        outputs: m.outputs.iter().map(|(k, v)| (k.clone(), raw_output(v))).collect(),
        files: m.files.clone(),
        steps: m.steps.clone(),
    };
    serde_yaml::to_string(&raw)
        .expect("manifest serialization is infallible")
        .into_bytes()
}

impl Serialize for InputSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut raw = serde_json::to_value(raw_input(self)).map_err(serde::ser::Error::custom)?;
        // keep the default as JSON rather than its YAML rendering
        if let (Some(obj), Some(default)) = (raw.as_object_mut(), &self.default) {
            obj.insert("value".into(), default.clone());
        }
        raw.serialize(serializer)
    }
}

impl Serialize for OutputSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        raw_output(self).serialize(serializer)
    }
}

/// Render a bound the way people write it: `2` rather than `2.0`.
pub(crate) fn fmt_number(v: f64) -> String {
    let a = v.abs();
    if v.fract() == 0.0 && a < 1e9 {
        format!("{}", v as i64)
    } else if a >= 1e9 || (a < 1e-4 && a > 0.0) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn range_text(min: Option<f64>, max: Option<f64>) -> Option<String> {
    if min.is_none() && max.is_none() {
        return None;
    }
    Some(format!(
        "[{}, {}]",
        min.map_or("-inf".to_string(), fmt_number),
        max.map_or("inf".to_string(), fmt_number)
    ))
}

/// One-line summary of an input, e.g. `lattice_constant Number [2, 10] angstrom`.
pub fn input_summary(name: &str, spec: &InputSpec) -> String {
    let mut line = format!("{name} {}", spec.kind);
    if let Some(opts) = &spec.options {
        let _ = write!(line, " {{{}}}", opts.join(", "));
    }
    if let Some(r) = range_text(spec.min, spec.max) {
        let _ = write!(line, " {r}");
    }
    if let Some(u) = &spec.units {
        let _ = write!(line, " {u}");
    }
    if let Some(p) = spec.property {
        let _ = write!(line, " ({p})");
    }
    if let Some(d) = &spec.default {
        let _ = write!(line, " default={d}");
    }
    if !spec.description.is_empty() {
        let _ = write!(line, " - {}", spec.description);
    }
    line
}

pub fn output_summary(name: &str, spec: &OutputSpec) -> String {
    let mut line = format!("{name} {}", spec.kind);
    if let Some(u) = &spec.units {
        let _ = write!(line, " {u}");
    }
    if !spec.description.is_empty() {
        let _ = write!(line, " - {}", spec.description);
    }
    line
}

/// Human-readable overview of a tool.
pub fn describe(m: &ToolManifest) -> String {
    let mut out = format!("{} ({})\n", m.name, m.revision);
    for line in m.description.trim().lines() {
        let _ = writeln!(out, "  {line}");
    }
    out.push_str("\ninputs:\n");
    for (name, spec) in &m.inputs {
        let _ = writeln!(out, "  {}", input_summary(name, spec));
    }
    out.push_str("\noutputs:\n");
    for (name, spec) in &m.outputs {
        let _ = writeln!(out, "  {}", output_summary(name, spec));
    }
    out
}

/// A tool bundle on disk: a directory holding `tool.yaml` and the files it lists.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub root: PathBuf,
    pub manifest: ToolManifest,
    /// The `tool.yaml` bytes exactly as read.
    pub manifest_bytes: Vec<u8>,
}

impl Bundle {
    pub fn load(dir: impl AsRef<Path>) -> Result<Bundle, ManifestError> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ManifestError::Io { path, source }
        };
        let root = dir.canonicalize().map_err(io(dir))?;
        let manifest_path = root.join(MANIFEST_FILE);
        let manifest_bytes = std::fs::read(&manifest_path).map_err(io(&manifest_path))?;
        let manifest = parse_manifest(&manifest_bytes)?;

        for (i, f) in manifest.files.iter().enumerate() {
            let resolved = root.join(f).canonicalize().map_err(|_| {
                schema(format!("files[{i}]"), format!("'{f}' does not exist in the bundle"))
            })?;
            if !resolved.starts_with(&root) || !resolved.is_file() {
                return Err(schema(
                    format!("files[{i}]"),
                    format!("'{f}' is not a regular file inside the bundle"),
                ));
            }
        }
        let ctx = ValidationContext::with_base_dir(&root);
        for (name, spec) in &manifest.inputs {
            if let Some(default) = spec.default.as_ref().filter(|d| values::is_file_reference(d)) {
                values::validate_value(spec, default, &ctx)
                    .map_err(|e| schema(format!("inputs.{name}.value"), e.to_string()))?;
            }
        }
        Ok(Bundle {
            root,
            manifest,
            manifest_bytes,
        })
    }
}
