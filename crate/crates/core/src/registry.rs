//! Tool discovery and publication.
//!
//! Layout: `registry/index.json` plus one immutable snapshot directory per
//! published revision, `registry/<tool>/r<N>/`. Installed (dev) tools are
//! recorded by the path of their working copy and never copied.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use ulid::Ulid;

use crate::manifest::{
    parse_manifest, Bundle, InputSpec, ManifestError, OutputSpec, RevisionTag, ToolManifest, MANIFEST_FILE,
};

pub const INDEX_FILE: &str = "index.json";
const LOCK_FILE: &str = ".index.lock";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("no tool named '{0}' is installed or published")]
    ToolNotFound(String),
    #[error("tool '{tool}' has no revision {rev}")]
    RevisionNotFound { tool: String, rev: RevisionTag },
    #[error(transparent)]
    Schema(#[from] ManifestError),
    #[error("registry entry {tool} {rev} is corrupt: {reason}")]
    CorruptEntry {
        tool: String,
        rev: RevisionTag,
        reason: String,
    },
    #[error("registry index: {0}")]
    Index(String),
    #[error("registry i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RegistryError + '_ {
    move |source| RegistryError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishMetadata {
    #[serde(default)]
    pub authors: Vec<String>,
    #[serde(default)]
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishedRevision {
    pub revision: u32,
    /// SHA-256 of the published `tool.yaml` bytes.
    pub digest: String,
    pub doi: String,
    pub published: DateTime<Utc>,
    #[serde(flatten)]
    pub metadata: PublishMetadata,
}

impl PublishedRevision {
    pub fn tag(&self) -> RevisionTag {
        RevisionTag::published(self.revision).expect("revisions start at 1")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    #[serde(default)]
    pub revisions: Vec<PublishedRevision>,
}

impl RegistryEntry {
    pub fn latest(&self) -> RevisionTag {
        self.revisions.last().map_or(RevisionTag::Dev, PublishedRevision::tag)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Index {
    tools: BTreeMap<String, RegistryEntry>,
}

/// `local:<name>/r<N>/<first 8 hex digits of the manifest digest>`.
pub fn pseudo_doi(name: &str, revision: u32, digest: &str) -> String {
    format!("local:{name}/r{revision}/{}", &digest[..8])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolSummary {
    pub name: String,
    pub latest: RevisionTag,
    pub description: String,
}

/// A tool resolved to one revision.
#[derive(Debug, Clone)]
pub struct ResolvedTool {
    pub name: String,
    pub revision: RevisionTag,
    pub manifest: ToolManifest,
    /// Directory holding the bundle (snapshot or dev working copy).
    pub root: PathBuf,
    pub publication: Option<PublishedRevision>,
}

#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

impl Registry {
    pub fn open(root: impl Into<PathBuf>) -> Result<Registry, RegistryError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Registry { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn has_index(&self) -> bool {
        self.root.join(INDEX_FILE).is_file()
    }

    fn read_index(&self) -> Result<Index, RegistryError> {
        let path = self.root.join(INDEX_FILE);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| RegistryError::Index(e.to_string())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Index::default()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn write_index(&self, index: &Index) -> Result<(), RegistryError> {
        let path = self.root.join(INDEX_FILE);
        let tmp = self.root.join(format!(".{INDEX_FILE}.{}.tmp", Ulid::new()));
        let mut bytes = serde_json::to_vec_pretty(index).expect("index serializes");
        bytes.push(b'\n');
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    // Serializes index updates across processes.
    fn lock(&self) -> Result<File, RegistryError> {
        let path = self.root.join(LOCK_FILE);
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        f.lock().map_err(io_err(&path))?;
        Ok(f)
    }

    pub fn entry(&self, name: &str) -> Result<Option<RegistryEntry>, RegistryError> {
        Ok(self.read_index()?.tools.remove(name))
    }

    /// Register the working copy at `dir` as the tool's `dev` revision.
    pub fn install(&self, dir: impl AsRef<Path>) -> Result<ToolManifest, RegistryError> {
        let bundle = Bundle::load(dir)?;
        let _guard = self.lock()?;
        let mut index = self.read_index()?;
        index.tools.entry(bundle.manifest.name.clone()).or_default().dev = Some(bundle.root.clone());
        self.write_index(&index)?;
        Ok(bundle.manifest)
    }

    /// Snapshot the bundle at `dir` as the next revision of its tool.
    pub fn publish(
        &self,
        dir: impl AsRef<Path>,
        metadata: PublishMetadata,
    ) -> Result<PublishedRevision, RegistryError> {
        let bundle = Bundle::load(dir)?;
        let m = &bundle.manifest;
        for (at, empty) in [("inputs", m.inputs.is_empty()), ("outputs", m.outputs.is_empty())] {
            if empty {
                return Err(ManifestError::Schema {
                    at: at.into(),
                    reason: format!("a published tool must declare at least one of its {at}"),
                }
                .into());
            }
        }
        let digest = hex::encode(Sha256::digest(&bundle.manifest_bytes));

        let _guard = self.lock()?;
        let mut index = self.read_index()?;
        let entry = index.tools.entry(m.name.clone()).or_default();
        let n = entry.revisions.len() as u32 + 1;
        let tool_dir = self.root.join(&m.name);
        let target = tool_dir.join(format!("r{n}"));
        if target.exists() {
            return Err(RegistryError::Index(format!(
                "{} exists but is not in the index",
                target.display()
            )));
        }
        let tmp = tool_dir.join(format!(".tmp-r{n}-{}", Ulid::new()));
        let copied = copy_tree(&bundle.root, &tmp).and_then(|()| {
            let snap = fs::read(tmp.join(MANIFEST_FILE))?;
            if snap != bundle.manifest_bytes {
                return Err(io::Error::other("bundle manifest changed while publishing"));
            }
            fs::rename(&tmp, &target)
        });
        if let Err(e) = copied {
            let _ = fs::remove_dir_all(&tmp);
            return Err(io_err(&target)(e));
        }
        let published = PublishedRevision {
            revision: n,
            doi: pseudo_doi(&m.name, n, &digest),
            digest,
            published: Utc::now(),
            metadata,
        };
        entry.revisions.push(published.clone());
        self.write_index(&index)?;
        Ok(published)
    }

    /// One row per tool, by name. `filter` matches case-insensitively
    /// against names and descriptions.
    pub fn find_tools(&self, filter: Option<&str>) -> Result<Vec<ToolSummary>, RegistryError> {
        let index = self.read_index()?;
        let needle = filter.map(str::to_lowercase);
        let mut rows = Vec::new();
        for name in index.tools.keys() {
            let t = self.search_tool(name, None)?;
            let hit = needle.as_ref().is_none_or(|n| {
                name.to_lowercase().contains(n) || t.manifest.description.to_lowercase().contains(n)
            });
            if hit {
                rows.push(ToolSummary {
                    name: name.clone(),
                    latest: t.revision,
                    description: t.manifest.description,
                });
            }
        }
        Ok(rows)
    }

    /// Resolve `name` at `rev`; without a revision, the newest published
    /// one, or the dev working copy if the tool was never published.
    pub fn search_tool(&self, name: &str, rev: Option<RevisionTag>) -> Result<ResolvedTool, RegistryError> {
        let entry = self
            .read_index()?
            .tools
            .remove(name)
            .ok_or_else(|| RegistryError::ToolNotFound(name.to_string()))?;
        let rev = rev.unwrap_or_else(|| entry.latest());
        let not_found = || RegistryError::RevisionNotFound {
            tool: name.to_string(),
            rev,
        };
        match rev {
            RevisionTag::Dev => {
                let dir = entry.dev.ok_or_else(not_found)?;
                let bundle = Bundle::load(&dir)?;
                Ok(ResolvedTool {
                    name: name.to_string(),
                    revision: rev,
                    manifest: bundle.manifest,
                    root: bundle.root,
                    publication: None,
                })
            }
            RevisionTag::Published(n) => {
                let published = entry
                    .revisions
                    .iter()
                    .find(|p| p.revision == n.get())
                    .cloned()
                    .ok_or_else(not_found)?;
                let root = self.root.join(name).join(rev.to_string());
                let corrupt = |reason: String| RegistryError::CorruptEntry {
                    tool: name.to_string(),
                    rev,
                    reason,
                };
                let bytes = fs::read(root.join(MANIFEST_FILE)).map_err(|e| corrupt(e.to_string()))?;
                if hex::encode(Sha256::digest(&bytes)) != published.digest {
                    return Err(corrupt("manifest does not match its recorded digest".into()));
                }
                let mut manifest = parse_manifest(&bytes).map_err(|e| corrupt(e.to_string()))?;
                manifest.revision = rev;
                Ok(ResolvedTool {
                    name: name.to_string(),
                    revision: rev,
                    manifest,
                    root,
                    publication: Some(published),
                })
            }
        }
    }

    pub fn get_inputs(
        &self,
        name: &str,
        rev: Option<RevisionTag>,
    ) -> Result<IndexMap<String, InputSpec>, RegistryError> {
        Ok(self.search_tool(name, rev)?.manifest.inputs)
    }

    pub fn get_outputs(
        &self,
        name: &str,
        rev: Option<RevisionTag>,
    ) -> Result<IndexMap<String, OutputSpec>, RegistryError> {
        Ok(self.search_tool(name, rev)?.manifest.outputs)
    }
}

fn copy_tree(from: &Path, to: &Path) -> io::Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let ty = entry.file_type()?;
        let dest = to.join(entry.file_name());
        if ty.is_dir() {
            copy_tree(&entry.path(), &dest)?;
        } else if ty.is_file() || (ty.is_symlink() && entry.path().is_file()) {
            fs::copy(entry.path(), &dest)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(dir: &Path, name: &str, description: &str, inputs: bool) -> PathBuf {
        let root = dir.join(name);
        fs::create_dir_all(&root).unwrap();
        let inputs = if inputs {
            "inputs:\n  x: {type: Number, value: 1}\n"
        } else {
            ""
        };
        fs::write(
            root.join(MANIFEST_FILE),
            format!(
                "name: {name}\ndescription: {description}\n{inputs}outputs:\n  y: {{type: Number}}\nfiles: [helper.txt]\nsteps:\n  - name: run\n    command: [\"true\"]\n"
            ),
        )
        .unwrap();
        fs::write(root.join("helper.txt"), "data").unwrap();
        root
    }

    fn r(n: u32) -> RevisionTag {
        RevisionTag::published(n).unwrap()
    }

    #[test]
    fn publish_lifecycle() {
        let work = tempfile::tempdir().unwrap();
        let reg = Registry::open(work.path().join("registry")).unwrap();
        assert!(reg.find_tools(None).unwrap().is_empty());

        let b = bundle(work.path(), "melt", "Melting point by coexistence", true);
        let p1 = reg.publish(&b, PublishMetadata::default()).unwrap();
        assert_eq!(p1.revision, 1);
        assert_eq!(p1.doi, format!("local:melt/r1/{}", &p1.digest[..8]));
        let p1b = reg.publish(&b, PublishMetadata::default()).unwrap();
        // byte-identical bundle: new revision, same digest
        assert_eq!(p1b.revision, 2);
        assert_eq!(p1b.doi.replace("/r2/", "/r1/"), p1.doi);

        fs::write(b.join("helper.txt"), "changed").unwrap();
        let text = fs::read_to_string(b.join(MANIFEST_FILE)).unwrap();
        fs::write(b.join(MANIFEST_FILE), text.replace("coexistence", "coexistence method")).unwrap();
        let p3 = reg.publish(&b, PublishMetadata::default()).unwrap();
        assert_eq!(p3.revision, 3);
        assert_ne!(p3.digest, p1.digest);

        let latest = reg.search_tool("melt", None).unwrap();
        assert_eq!(latest.revision, r(3));
        assert_eq!(latest.manifest.revision, r(3));
        let first = reg.search_tool("melt", Some(r(1))).unwrap();
        assert_eq!(fs::read_to_string(first.root.join("helper.txt")).unwrap(), "data");
        assert!(matches!(
            reg.search_tool("melt", Some(r(9))),
            Err(RegistryError::RevisionNotFound { .. })
        ));
        assert!(matches!(reg.search_tool("melt", Some(RevisionTag::Dev)), Err(RegistryError::RevisionNotFound { .. })));
        assert!(matches!(reg.search_tool("nope", None), Err(RegistryError::ToolNotFound(_))));
        assert_eq!(reg.get_inputs("melt", None).unwrap().len(), 1);
        assert_eq!(reg.get_outputs("melt", Some(r(1))).unwrap().len(), 1);
    }

    #[test]
    fn install_and_find() {
        let work = tempfile::tempdir().unwrap();
        let reg = Registry::open(work.path().join("registry")).unwrap();
        let melt = bundle(work.path(), "melt", "Melting point by coexistence", true);
        let pn = bundle(work.path(), "pn", "P-N junction", true);
        reg.install(&melt).unwrap();
        reg.publish(&pn, PublishMetadata::default()).unwrap();

        let all = reg.find_tools(None).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].name, "melt");
        assert_eq!(all[0].latest, RevisionTag::Dev);
        assert_eq!(all[1].latest, r(1));
        let hits = reg.find_tools(Some("MELTING")).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].name, "melt");
        // dev resolves to the working copy itself
        let dev = reg.search_tool("melt", None).unwrap();
        assert_eq!(dev.root, melt.canonicalize().unwrap());
    }

    #[test]
    fn publish_requires_inputs() {
        let work = tempfile::tempdir().unwrap();
        let reg = Registry::open(work.path().join("registry")).unwrap();
        let b = bundle(work.path(), "bare", "no inputs", false);
        assert!(matches!(
            reg.publish(&b, PublishMetadata::default()),
            Err(RegistryError::Schema(ManifestError::Schema { .. }))
        ));
        assert!(reg.find_tools(None).unwrap().is_empty());
    }

    #[test]
    fn tampering_is_detected() {
        let work = tempfile::tempdir().unwrap();
        let reg = Registry::open(work.path().join("registry")).unwrap();
        let b = bundle(work.path(), "melt", "d", true);
        reg.publish(&b, PublishMetadata::default()).unwrap();
        let snap = reg.root().join("melt/r1").join(MANIFEST_FILE);
        let text = fs::read_to_string(&snap).unwrap();
        fs::write(&snap, text.replace("value: 1", "value: 2")).unwrap();
        assert!(matches!(reg.search_tool("melt", None), Err(RegistryError::CorruptEntry { .. })));
    }

    #[test]
    fn concurrent_publishes_get_distinct_revisions() {
        let work = tempfile::tempdir().unwrap();
        let reg = Registry::open(work.path().join("registry")).unwrap();
        let b = bundle(work.path(), "melt", "d", true);
        let handles: Vec<_> = (0..6)
            .map(|_| {
                let reg = reg.clone();
                let b = b.clone();
                std::thread::spawn(move || reg.publish(&b, PublishMetadata::default()).unwrap().revision)
            })
            .collect();
        let mut revs: Vec<u32> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        revs.sort();
        assert_eq!(revs, vec![1, 2, 3, 4, 5, 6]);
    }
}
