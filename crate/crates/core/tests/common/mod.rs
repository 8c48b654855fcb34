#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::Utc;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::json;

use fairflow::cache::canonical_key;
use fairflow::exemplars;
use fairflow::manifest::{parse_manifest, Bundle, RevisionTag, ToolManifest};
use fairflow::record::{RecordId, RunRecord, RunStatus, StepResult};
use fairflow::runner::{Engine, LocalVenue, RunError, Venue};
use fairflow::units::parse_unit;
use fairflow::values::{InputSet, TypedValue};

pub const BIN: &str = env!("CARGO_BIN_EXE_fairflow");

/// Local venue that counts how many runs reach it.
pub struct Counting(pub Arc<AtomicUsize>);

impl Venue for Counting {
    fn execute(&self, m: &ToolManifest, dir: &Path, limit: Duration) -> (Vec<StepResult>, Option<RunError>) {
        self.0.fetch_add(1, Ordering::SeqCst);
        LocalVenue.execute(m, dir, limit)
    }
}

pub fn count(c: &Arc<AtomicUsize>) -> usize {
    c.load(Ordering::SeqCst)
}

/// Engine over `<tmp>/home` with a counting venue.
pub fn counting_engine() -> (tempfile::TempDir, Engine, Arc<AtomicUsize>) {
    let tmp = tempfile::tempdir().unwrap();
    let counter = Arc::new(AtomicUsize::new(0));
    let engine = Engine::with_venue(tmp.path().join("home"), Box::new(Counting(counter.clone()))).unwrap();
    (tmp, engine, counter)
}

pub fn exemplar_home() -> (tempfile::TempDir, Engine) {
    let tmp = tempfile::tempdir().unwrap();
    let engine = Engine::open(tmp.path().join("home")).unwrap();
    install_exemplars_into(&engine, tmp.path());
    (tmp, engine)
}

pub fn install_exemplars_into(engine: &Engine, root: &Path) {
    exemplars::install_exemplars(engine.registry(), &root.join("bundles"), Path::new(BIN)).unwrap();
}

pub fn write_bundle(root: &Path, name: &str, manifest: &str) -> PathBuf {
    let dir = root.join("src").join(name);
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("tool.yaml"), manifest).unwrap();
    dir
}

pub fn melt_manifest(root: &Path) -> ToolManifest {
    let dirs = exemplars::write_bundles(root, Path::new(BIN)).unwrap();
    Bundle::load(&dirs[0]).unwrap().manifest
}

/// Number of complete entries under a cache root.
pub fn cache_entries(dir: &Path) -> usize {
    let Ok(rd) = fs::read_dir(dir) else { return 0 };
    let mut n = 0;
    for e in rd.flatten() {
        let p = e.path();
        if p.join("meta.json").is_file() {
            n += 1;
        } else if p.is_dir() {
            n += cache_entries(&p);
        }
    }
    n
}

pub fn oracle_schema() -> ToolManifest {
    parse_manifest(
        b"name: alpha
description: synthetic schema
inputs:
  x: {type: Number, units: m}
  n: {type: Integer}
  flag: {type: Boolean}
  c: {type: Choice, options: [red, green, blue]}
  label: {type: Text}
outputs:
  y: {type: Number, units: K}
  ok: {type: Boolean}
steps: [{name: s, command: [\"true\"]}]
",
    )
    .unwrap()
}

const COLORS: [&str; 3] = ["red", "green", "blue"];
const LABELS: [&str; 3] = ["a", "b", "c d"];

pub fn random_record(rng: &mut impl Rng, schema: &ToolManifest) -> RunRecord {
    let tool = if rng.gen_bool(0.8) { "alpha" } else { "beta" };
    let revision = RevisionTag::published(rng.gen_range(1..=2)).unwrap();
    let inputs: InputSet = [
        (
            "x",
            TypedValue::Number {
                value: f64::from(rng.gen_range(0..20)) * 0.5,
                units: Some(parse_unit("m").unwrap()),
            },
        ),
        ("n", TypedValue::Integer(rng.gen_range(-5..=5))),
        ("flag", TypedValue::Boolean(rng.gen())),
        ("c", TypedValue::Choice(COLORS.choose(rng).unwrap().to_string())),
        ("label", TypedValue::Text(LABELS.choose(rng).unwrap().to_string())),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let status = match rng.gen_range(0..8) {
        0 => RunStatus::Failed("StepFailed".into()),
        1 => RunStatus::Failed("Timeout".into()),
        _ => RunStatus::Completed,
    };
    let outputs = if status.is_completed() {
        [
            (
                "y".to_string(),
                TypedValue::Number {
                    value: f64::from(rng.gen_range(500..1500)),
                    units: Some(parse_unit("K").unwrap()),
                },
            ),
            ("ok".to_string(), TypedValue::Boolean(rng.gen())),
        ]
        .into_iter()
        .collect()
    } else {
        Default::default()
    };
    debug_assert_eq!(schema.inputs.len(), inputs.len());
    let now = Utc::now();
    RunRecord {
        id: RecordId::PENDING,
        tool: tool.into(),
        revision,
        cache_key: canonical_key(tool, revision, &inputs),
        inputs,
        outputs,
        status,
        steps: Vec::new(),
        started: now,
        finished: now,
        cache_hit: false,
    }
}

#[derive(Debug, Clone)]
pub enum OVal {
    Str(String),
    Num(f64),
    Bool(bool),
    Strs(Vec<String>),
}

/// One atom as the oracle sees it: field, operator, operand in the
/// field's declared units.
#[derive(Debug, Clone)]
pub struct OAtom {
    pub field: &'static str,
    pub op: &'static str,
    pub value: OVal,
}

const ORDER_OPS: [&str; 6] = ["=", "!=", "<", "<=", ">", ">="];

/// A predicate expression and the atoms it should mean.
pub fn random_predicate(rng: &mut impl Rng) -> (String, Vec<OAtom>) {
    let mut text = Vec::new();
    let mut atoms = Vec::new();
    let pinned = rng.gen_bool(0.85);
    if pinned {
        text.push("tool = alpha".to_string());
        atoms.push(OAtom { field: "tool", op: "=", value: OVal::Str("alpha".into()) });
    } else if rng.gen_bool(0.5) {
        text.push("tool != alpha".to_string());
        atoms.push(OAtom { field: "tool", op: "!=", value: OVal::Str("alpha".into()) });
    }
    let extra = rng.gen_range(usize::from(!pinned)..=3);
    for _ in 0..extra {
        let choice = if pinned { rng.gen_range(0..9) } else { rng.gen_range(0..2) };
        let (t, a) = match choice {
            0 => {
                let (op, lit, v) = match rng.gen_range(0..3) {
                    0 => ("=", "r1".to_string(), OVal::Str("r1".into())),
                    1 => ("!=", "r2".to_string(), OVal::Str("r2".into())),
                    _ => ("in", r#"["r1", "r2"]"#.to_string(), OVal::Strs(vec!["r1".into(), "r2".into()])),
                };
                (format!("revision {op} {lit}"), OAtom { field: "revision", op, value: v })
            }
            1 => {
                let (op, lit) = *[("=", "completed"), ("=", "failed"), ("!=", "completed"), ("=", "failed:Timeout")]
                    .choose(rng)
                    .unwrap();
                (format!("status {op} {lit}"), OAtom { field: "status", op, value: OVal::Str(lit.into()) })
            }
            2 => {
                let op = *ORDER_OPS.choose(rng).unwrap();
                let k = rng.gen_range(0..20);
                let (lit, v) = match (op, rng.gen_range(0..3)) {
                    ("=" | "!=", 0) => (format!("{}", f64::from(k) * 0.5), f64::from(k) * 0.5),
                    ("=" | "!=", _) => (format!("\"{} m\"", f64::from(k) * 0.5), f64::from(k) * 0.5),
                    (_, 0) => (format!("{}", f64::from(k) * 0.5), f64::from(k) * 0.5),
                    // between grid points, so conversion rounding cannot matter
                    (_, _) => (format!("{} cm", k * 50 + 25), f64::from(k) * 0.5 + 0.25),
                };
                (format!("input.x {op} {lit}"), OAtom { field: "input.x", op, value: OVal::Num(v) })
            }
            3 => {
                let op = *ORDER_OPS.choose(rng).unwrap();
                let n = rng.gen_range(-6..=6);
                (format!("input.n {op} {n}"), OAtom { field: "input.n", op, value: OVal::Num(f64::from(n)) })
            }
            4 => {
                let op = *["=", "!="].choose(rng).unwrap();
                let b: bool = rng.gen();
                (format!("input.flag {op} {b}"), OAtom { field: "input.flag", op, value: OVal::Bool(b) })
            }
            5 => {
                if rng.gen_bool(0.4) {
                    let mut set: Vec<String> = COLORS.iter().filter(|_| rng.gen()).map(|s| s.to_string()).collect();
                    set.push("purple".into());
                    let lit = serde_json::to_string(&set).unwrap();
                    (format!("input.c in {lit}"), OAtom { field: "input.c", op: "in", value: OVal::Strs(set) })
                } else {
                    let op = *["=", "!="].choose(rng).unwrap();
                    let c = *COLORS.choose(rng).unwrap();
                    (format!("input.c {op} {c}"), OAtom { field: "input.c", op, value: OVal::Str(c.into()) })
                }
            }
            6 => {
                let op = *["=", "!="].choose(rng).unwrap();
                let l = *LABELS.choose(rng).unwrap();
                (format!("input.label {op} {}", json!(l)), OAtom { field: "input.label", op, value: OVal::Str(l.into()) })
            }
            7 => {
                let op = *ORDER_OPS.choose(rng).unwrap();
                let j = rng.gen_range(500..1500);
                if matches!(op, "=" | "!=") {
                    (format!("output.y {op} {j}"), OAtom { field: "output.y", op, value: OVal::Num(f64::from(j)) })
                } else {
                    let lit = format!("{} kK", (f64::from(j) + 0.5) / 1000.0);
                    (format!("output.y {op} {lit}"), OAtom { field: "output.y", op, value: OVal::Num(f64::from(j) + 0.5) })
                }
            }
            _ => {
                let op = *["=", "!="].choose(rng).unwrap();
                let b: bool = rng.gen();
                (format!("output.ok {op} {b}"), OAtom { field: "output.ok", op, value: OVal::Bool(b) })
            }
        };
        text.push(t);
        atoms.push(a);
    }
    (text.join(" AND "), atoms)
}

fn record_field(r: &RunRecord, field: &str) -> Option<OVal> {
    let typed = |v: &TypedValue| match v {
        TypedValue::Number { value, .. } => OVal::Num(*value),
        TypedValue::Integer(i) => OVal::Num(*i as f64),
        TypedValue::Boolean(b) => OVal::Bool(*b),
        TypedValue::Text(s) | TypedValue::Choice(s) => OVal::Str(s.clone()),
        other => panic!("unexpected {other:?}"),
    };
    match field {
        "tool" => Some(OVal::Str(r.tool.clone())),
        "revision" => Some(OVal::Str(r.revision.to_string())),
        "status" => Some(OVal::Str(r.status.to_string())),
        f => match (f.strip_prefix("input."), f.strip_prefix("output.")) {
            (Some(n), _) => r.inputs.get(n).map(typed),
            (_, Some(n)) => r.outputs.get(n).map(typed),
            _ => None,
        },
    }
}

/// Brute-force evaluation of one atom on a record.
pub fn oracle_matches(a: &OAtom, r: &RunRecord) -> bool {
    let Some(actual) = record_field(r, a.field) else {
        return false;
    };
    let same = |operand: &OVal| match (&actual, operand) {
        (OVal::Str(x), OVal::Str(y)) if a.field == "status" && y == "failed" => x.starts_with("failed:"),
        (OVal::Str(x), OVal::Str(y)) => x == y,
        (OVal::Num(x), OVal::Num(y)) => x == y,
        (OVal::Bool(x), OVal::Bool(y)) => x == y,
        _ => panic!("oracle type confusion on {}", a.field),
    };
    match (a.op, &a.value) {
        ("=", v) => same(v),
        ("!=", v) => !same(v),
        ("in", OVal::Strs(set)) => set.iter().any(|s| same(&OVal::Str(s.clone()))),
        (op, OVal::Num(y)) => {
            let OVal::Num(x) = actual else { panic!("ordering on non-number") };
            match op {
                "<" => x < *y,
                "<=" => x <= *y,
                ">" => x > *y,
                ">=" => x >= *y,
                _ => unreachable!(),
            }
        }
        _ => unreachable!(),
    }
}
