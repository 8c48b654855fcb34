use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde_json::json;

use super::*;
use crate::manifest::{parse_manifest, Bundle};
use crate::registry::PublishMetadata;
use crate::values::build_input_set;

/// A bundle whose single step runs `script` with `sh`.
fn bundle(dir: &Path, name: &str, outputs: &str, script: &str) -> PathBuf {
    let root = dir.join(name);
    fs::create_dir_all(&root).unwrap();
    fs::write(
        root.join("tool.yaml"),
        format!(
            r#"name: {name}
description: runner test tool
inputs:
  lattice_constant: {{type: Number, units: angstrom, min: 2, max: 10, value: 4}}
  label: {{type: Text, value: a}}
outputs:
{outputs}
files: [run.sh, data/helper.txt]
steps:
  - name: main
    command: [sh, run.sh]
"#
        ),
    )
    .unwrap();
    fs::write(root.join("run.sh"), script).unwrap();
    fs::create_dir_all(root.join("data")).unwrap();
    fs::write(root.join("data/helper.txt"), "helper bytes\n").unwrap();
    root
}

const ONE_OUTPUT: &str = "  t: {type: Number, units: K}";

fn counting_script(counter: &Path) -> String {
    format!(
        "echo run >> '{}'\nprintf '{{\"type\": \"Number\", \"value\": 1.5, \"units\": \"kK\"}}' > _outputs/t.json\n",
        counter.display()
    )
}

fn count(counter: &Path) -> usize {
    fs::read_to_string(counter).map(|s| s.lines().count()).unwrap_or(0)
}

fn manifest_with_steps(steps: &str) -> ToolManifest {
    parse_manifest(
        format!("name: steps\ndescription: d\ninputs: {{}}\noutputs: {{}}\nsteps:\n{steps}").as_bytes(),
    )
    .unwrap()
}

#[test]
fn run_dir_contents() {
    let work = tempfile::tempdir().unwrap();
    let root = bundle(work.path(), "tool", ONE_OUTPUT, "true\n");
    let b = Bundle::load(&root).unwrap();
    let inputs = build_input_set(&b.manifest, &[("lattice_constant".to_string(), json!("0.5 nm"))].into_iter().collect()).unwrap();
    let base = work.path().join("runs");
    let d1 = prepare_run_dir(&b.manifest, &inputs, &base, &b.root).unwrap();
    let d2 = prepare_run_dir(&b.manifest, &inputs, &base, &b.root).unwrap();
    assert_ne!(d1, d2);
    assert_eq!(fs::read(d1.join("data/helper.txt")).unwrap(), fs::read(root.join("data/helper.txt")).unwrap());
    assert!(d1.join("_outputs").is_dir());
    assert_eq!(fs::read_dir(d1.join("_outputs")).unwrap().count(), 0);
    let raw: Value = serde_json::from_slice(&fs::read(d1.join("inputs.json")).unwrap()).unwrap();
    assert_eq!(raw["lattice_constant"], json!({"value": 5.0, "units": "angstrom"}));
    let back = InputSet::from_raw_json(&b.manifest, &raw, &ValidationContext::with_base_dir(&d1)).unwrap();
    assert_eq!(back, inputs);
}

#[test]
fn steps_run_in_order_and_fail_fast() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest_with_steps("  - {name: ok, command: [\"true\"]}\n");
    let r = execute_steps(&m, dir.path(), Duration::from_secs(10)).unwrap();
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].exit_code, Some(0));

    let m = manifest_with_steps(
        "  - {name: first, command: [sh, -c, \"echo oops >&2; exit 3\"]}\n  - {name: second, command: [sh, -c, \"touch ran\"]}\n",
    );
    let (results, err) = LocalVenue.execute(&m, dir.path(), Duration::from_secs(10));
    assert_eq!(results.len(), 1);
    assert_eq!(results[0].stderr_len, 5);
    match err {
        Some(RunError::StepFailed { step, exit_code, stderr_tail }) => {
            assert_eq!(step, "first");
            assert_eq!(exit_code, Some(3));
            assert_eq!(stderr_tail, "oops");
        }
        other => panic!("{other:?}"),
    }
    assert!(!dir.path().join("ran").exists());
}

#[test]
fn steps_see_the_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest_with_steps("  - {name: env, command: [sh, -c, \"echo $FAIRFLOW_RUN_DIR; pwd -P\"]}\n");
    execute_steps(&m, dir.path(), Duration::from_secs(10)).unwrap();
    let out = fs::read_to_string(dir.path().join("_logs/env.out")).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(Path::new(lines[0]), dir.path());
    assert_eq!(Path::new(lines[1]), dir.path().canonicalize().unwrap());
}

#[test]
fn missing_program_is_a_step_failure() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest_with_steps("  - {name: ghost, command: [\"./does-not-exist\"]}\n");
    assert!(matches!(
        execute_steps(&m, dir.path(), Duration::from_secs(10)),
        Err(RunError::StepFailed { exit_code: None, .. })
    ));
}

#[test]
fn timeout_terminates_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest_with_steps("  - {name: slow, command: [sh, -c, \"sleep 5 & wait\"]}\n");
    let start = Instant::now();
    let err = execute_steps(&m, dir.path(), Duration::from_secs(1)).unwrap_err();
    let elapsed = start.elapsed();
    assert!(matches!(err, RunError::Timeout { ref step, .. } if step == "slow"), "{err:?}");
    assert!(elapsed < Duration::from_secs(3), "{elapsed:?}");

    // the per-step limit applies too
    let m = manifest_with_steps("  - {name: slow, command: [sleep, \"5\"], timeout_seconds: 1}\n");
    let start = Instant::now();
    assert!(matches!(execute_steps(&m, dir.path(), DEFAULT_TIME_LIMIT), Err(RunError::Timeout { .. })));
    assert!(start.elapsed() < Duration::from_secs(3));
}

#[test]
fn outputs_are_collected_and_converted() {
    let dir = tempfile::tempdir().unwrap();
    let m = parse_manifest(
        b"name: o\ndescription: d\noutputs:\n  a: {type: Number, units: K}\n  b: {type: Boolean}\n  c: {type: Text}\n  d: {type: Integer}\nsteps:\n  - {name: s, command: [\"true\"]}\n",
    )
    .unwrap();
    let out = dir.path().join("_outputs");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("a.json"), r#"{"type": "Number", "value": 1.5, "units": "kK"}"#).unwrap();
    fs::write(out.join("b.json"), r#"{"type": "Boolean", "value": true}"#).unwrap();
    fs::write(out.join("c.json"), r#"{"type": "Text", "value": "x"}"#).unwrap();
    match collect_outputs(&m, dir.path()) {
        Err(RunError::OutputMissing(names)) => assert_eq!(names, vec!["d".to_string()]),
        other => panic!("{other:?}"),
    }
    fs::write(out.join("d.json"), r#"{"type": "Integer", "value": 7}"#).unwrap();
    fs::write(out.join("debug.json"), "{}").unwrap();
    let got = collect_outputs(&m, dir.path()).unwrap();
    assert_eq!(got.keys().collect::<Vec<_>>(), ["a", "b", "c", "d"]);
    assert_eq!(got["a"].as_f64(), Some(1500.0));
    assert_eq!(got["a"].units().unwrap().as_str(), "K");

    fs::write(out.join("d.json"), r#"{"type": "Number", "value": 7}"#).unwrap();
    assert!(matches!(collect_outputs(&m, dir.path()), Err(RunError::OutputInvalid { ref name, .. }) if name == "d"));
    fs::write(out.join("d.json"), "not json").unwrap();
    assert!(matches!(collect_outputs(&m, dir.path()), Err(RunError::OutputInvalid { .. })));
}

fn engine_with(work: &Path, name: &str, outputs: &str, script: &str) -> Engine {
    let engine = Engine::open(work.join("home")).unwrap();
    let b = bundle(work, name, outputs, script);
    engine.registry().publish(&b, PublishMetadata::default()).unwrap();
    engine
}

#[test]
fn unit_equivalent_requests_hit_the_cache() {
    let work = tempfile::tempdir().unwrap();
    let counter = work.path().join("counter");
    let engine = engine_with(work.path(), "tool", ONE_OUTPUT, &counting_script(&counter));

    let first = engine.run(&RunRequest::new("tool").set("lattice_constant", "0.5 nm")).unwrap();
    assert!(!first.record.cache_hit);
    assert_eq!(first.record.steps.len(), 1);
    let second = engine.run(&RunRequest::new("tool").set("lattice_constant", "5 angstrom")).unwrap();
    assert!(second.record.cache_hit);
    assert!(second.record.steps.is_empty());
    assert_eq!(count(&counter), 1);
    assert_eq!(first.record.cache_key, second.record.cache_key);
    assert_eq!(
        canonical_outputs_bytes(&first.record.outputs),
        canonical_outputs_bytes(&second.record.outputs)
    );
    assert!(second.record.id > first.record.id);
    assert_eq!(engine.db().len().unwrap(), 2);

    // policies
    let bypass = |p| RunRequest {
        cache: p,
        ..RunRequest::new("tool").set("lattice_constant", "5 angstrom")
    };
    assert!(!engine.run(&bypass(CachePolicy::BypassRead)).unwrap().record.cache_hit);
    assert!(!engine.run(&bypass(CachePolicy::BypassBoth)).unwrap().record.cache_hit);
    assert!(engine.run(&bypass(CachePolicy::BypassWrite)).unwrap().record.cache_hit);
    assert_eq!(count(&counter), 3);

    // a different value is a different key
    let other = engine.run(&RunRequest::new("tool").set("lattice_constant", "6 angstrom")).unwrap();
    assert!(!other.record.cache_hit);
    let new_key = engine.run(&bypass(CachePolicy::BypassWrite).set("lattice_constant", "7 angstrom")).unwrap();
    assert!(!new_key.record.cache_hit);
    // bypass-write did not store it
    let again = engine.run(&RunRequest::new("tool").set("lattice_constant", "7 angstrom")).unwrap();
    assert!(!again.record.cache_hit);
}

#[test]
fn validation_errors_run_nothing() {
    let work = tempfile::tempdir().unwrap();
    let counter = work.path().join("counter");
    let engine = engine_with(work.path(), "tool", ONE_OUTPUT, &counting_script(&counter));
    let err = engine.run(&RunRequest::new("tool").set("lattice_constant", "5 nm")).unwrap_err();
    match &err {
        RunError::Validation(e) => match e.root() {
            ValueError::OutOfRange { value, .. } => assert_eq!(*value, 50.0),
            other => panic!("{other:?}"),
        },
        other => panic!("{other:?}"),
    }
    assert_eq!(count(&counter), 0);
    assert!(!work.path().join("home/runs").exists());
    assert!(matches!(
        engine.run(&RunRequest::new("missing")),
        Err(RunError::Registry(RegistryError::ToolNotFound(_)))
    ));
}

#[test]
fn failed_runs_are_recorded_but_not_cached() {
    let work = tempfile::tempdir().unwrap();
    let engine = engine_with(
        work.path(),
        "tool",
        "  t: {type: Number, units: K}\n  u: {type: Number, units: K}",
        "printf '{\"type\": \"Number\", \"value\": 1}' > _outputs/t.json\n",
    );
    for _ in 0..2 {
        match engine.run(&RunRequest::new("tool")) {
            Err(RunError::OutputMissing(names)) => assert_eq!(names, vec!["u".to_string()]),
            other => panic!("{other:?}"),
        }
    }
    let failed = engine.query(&QueryPredicate::parse("status = failed").unwrap(), None, None).unwrap();
    assert_eq!(failed.len(), 2);
    assert_eq!(failed[0].get("status"), Some(&json!("failed:OutputMissing")));
    assert!(!engine.cache().root().join("tool").exists());
}

#[test]
fn dev_revisions_are_never_cached() {
    let work = tempfile::tempdir().unwrap();
    let counter = work.path().join("counter");
    let engine = Engine::open(work.path().join("home")).unwrap();
    let b = bundle(work.path(), "tool", ONE_OUTPUT, &counting_script(&counter));
    engine.registry().install(&b).unwrap();
    for _ in 0..2 {
        let out = engine.run(&RunRequest::new("tool")).unwrap();
        assert!(!out.record.cache_hit);
        assert_eq!(out.record.revision, RevisionTag::Dev);
    }
    assert_eq!(count(&counter), 2);
}

#[test]
fn concurrent_runs_are_isolated() {
    let work = tempfile::tempdir().unwrap();
    // each run writes its label to a shared file outside its directory and
    // to its own output
    let script = "label=$(sed -n 's/.*\"label\": \"\\(.*\\)\".*/\\1/p' inputs.json)\n\
                  echo \"$label\" >> ../escaped.txt\n\
                  sleep 0.2\n\
                  printf '{\"type\": \"Text\", \"value\": \"%s\"}' \"$label\" > _outputs/who.json\n";
    let engine = engine_with(work.path(), "tool", "  who: {type: Text}", script);
    let (a, b) = std::thread::scope(|s| {
        let a = s.spawn(|| engine.run(&RunRequest::new("tool").set("label", "alpha")).unwrap());
        let b = s.spawn(|| engine.run(&RunRequest::new("tool").set("label", "beta")).unwrap());
        (a.join().unwrap(), b.join().unwrap())
    });
    assert_ne!(a.dir, b.dir);
    assert_eq!(a.record.outputs["who"], TypedValue::Text("alpha".into()));
    assert_eq!(b.record.outputs["who"], TypedValue::Text("beta".into()));
    for dir in [&a.dir, &b.dir] {
        let mut names: Vec<String> = fs::read_dir(dir.join("_outputs"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        assert_eq!(names, ["who.json"]);
    }
    assert_eq!(engine.db().len().unwrap(), 2);
}

#[test]
fn zero_time_limit_is_rejected() {
    let work = tempfile::tempdir().unwrap();
    let engine = engine_with(work.path(), "tool", ONE_OUTPUT, "true\n");
    let req = RunRequest {
        time_limit: Duration::ZERO,
        ..RunRequest::new("tool")
    };
    assert!(matches!(engine.run(&req), Err(RunError::InvalidRequest(_))));
}
