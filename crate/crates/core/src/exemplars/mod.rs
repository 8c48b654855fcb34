//! The two bundled example tools and the step programs behind them.
//!
//! Each bundle ships a `tool.yaml` whose step runs `fairflow surrogate
//! <name>`; [`install_exemplars`] rewrites that program to the running
//! executable and publishes the bundle.

pub mod melt;
pub mod pn;

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::manifest::MANIFEST_FILE;
use crate::registry::{PublishMetadata, PublishedRevision, Registry, RegistryError};

pub const MELT_TOOL: &str = "meltsurrogate";
pub const PN_TOOL: &str = "pnjunction_lite";

#[derive(Debug, thiserror::Error)]
pub enum ExemplarError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("inputs.json: {0}")]
    Inputs(String),
    #[error("{file}: {reason}")]
    Data { file: String, reason: String },
    #[error("degenerate voltage sweep: start {start} V, stop {stop} V, step {step} V")]
    DegenerateSweep { start: f64, stop: f64, step: f64 },
    #[error("image encoding failed: {0}")]
    Image(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// Which surrogate a step runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surrogate {
    Melt,
    Pn,
}

impl Surrogate {
    pub fn tool(self) -> &'static str {
        match self {
            Surrogate::Melt => MELT_TOOL,
            Surrogate::Pn => PN_TOOL,
        }
    }

    /// Read `inputs.json` in `dir` and write every output envelope to
    /// `dir/_outputs`.
    pub fn run(self, dir: &Path) -> Result<(), ExemplarError> {
        match self {
            Surrogate::Melt => melt::run(dir),
            Surrogate::Pn => pn::run(dir),
        }
    }
}

struct Template {
    name: &'static str,
    files: &'static [(&'static str, &'static str)],
}

const TEMPLATES: [Template; 2] = [
    Template {
        name: MELT_TOOL,
        files: &[
            (MANIFEST_FILE, include_str!("../../exemplars/meltsurrogate/tool.yaml")),
            ("metals.toml", include_str!("../../exemplars/meltsurrogate/metals.toml")),
            ("README.md", include_str!("../../exemplars/meltsurrogate/README.md")),
        ],
    },
    Template {
        name: PN_TOOL,
        files: &[
            (MANIFEST_FILE, include_str!("../../exemplars/pnjunction_lite/tool.yaml")),
            ("materials.toml", include_str!("../../exemplars/pnjunction_lite/materials.toml")),
            ("README.md", include_str!("../../exemplars/pnjunction_lite/README.md")),
        ],
    },
];

const PLACEHOLDER_PROGRAM: &str = "[\"fairflow\", ";

/// Write both bundles under `dest/<tool>` with their step program set to
/// `exe`. Returns the bundle directories.
pub fn write_bundles(dest: &Path, exe: &Path) -> Result<Vec<PathBuf>, ExemplarError> {
    let program = format!("[{}, ", json!(exe.to_string_lossy()));
    let mut dirs = Vec::new();
    for t in &TEMPLATES {
        let dir = dest.join(t.name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (file, text) in t.files {
            let text = if *file == MANIFEST_FILE {
                text.replace(PLACEHOLDER_PROGRAM, &program)
            } else {
                text.to_string()
            };
            let path = dir.join(file);
            fs::write(&path, text).map_err(io_err(&path))?;
        }
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Write both bundles under `dest` and publish each to `registry`.
pub fn install_exemplars(registry: &Registry, dest: &Path, exe: &Path) -> Result<Vec<PublishedRevision>, ExemplarError> {
    write_bundles(dest, exe)?
        .iter()
        .map(|dir| Ok(registry.publish(dir, PublishMetadata::default())?))
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExemplarError {
    let path = path.to_path_buf();
    move |source| ExemplarError::Io { path, source }
}

fn read_inputs(dir: &Path) -> Result<serde_json::Map<String, Value>, ExemplarError> {
    let path = dir.join("inputs.json");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    match serde_json::from_slice(&bytes) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ExemplarError::Inputs("not a JSON object".into())),
        Err(e) => Err(ExemplarError::Inputs(e.to_string())),
    }
}

fn read_data<T: serde::de::DeserializeOwned>(dir: &Path, file: &str) -> Result<T, ExemplarError> {
    let path = dir.join(file);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    toml::from_str(&text).map_err(|e| ExemplarError::Data {
        file: file.to_string(),
        reason: e.to_string(),
    })
}

// A Number input is either bare or `{"value": v, "units": u}` in the
// declared units.
fn number(inputs: &serde_json::Map<String, Value>, name: &str) -> Result<f64, ExemplarError> {
    let raw = inputs
        .get(name)
        .ok_or_else(|| ExemplarError::Inputs(format!("missing '{name}'")))?;
    raw.get("value")
        .unwrap_or(raw)
        .as_f64()
        .ok_or_else(|| ExemplarError::Inputs(format!("'{name}' is not a number")))
}

fn text<'a>(inputs: &'a serde_json::Map<String, Value>, name: &str) -> Result<&'a str, ExemplarError> {
    inputs
        .get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| ExemplarError::Inputs(format!("'{name}' is not a string")))
}

fn write_envelope(dir: &Path, name: &str, envelope: Value) -> Result<(), ExemplarError> {
    let path = dir.join("_outputs").join(format!("{name}.json"));
    let mut bytes = serde_json::to_vec(&envelope).expect("envelope serializes");
    bytes.push(b'\n');
    fs::write(&path, bytes).map_err(io_err(&path))
}
