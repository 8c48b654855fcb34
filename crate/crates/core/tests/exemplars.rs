mod common;

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use proptest::prelude::*;
use serde_json::{json, Value};

use fairflow::exemplars::{pn, write_bundles, Surrogate, MELT_TOOL, PN_TOOL};
use fairflow::manifest::Bundle;
use fairflow::runner::{collect_outputs, prepare_run_dir, CachePolicy, RunError, RunRequest};
use fairflow::values::{build_input_set, TypedValue};

use common::BIN;

/// Prepare a run directory for `surrogate` with `overrides`, run the step in
/// process and collect its outputs.
fn run_inline(
    root: &Path,
    surrogate: Surrogate,
    overrides: &IndexMap<String, Value>,
) -> (std::path::PathBuf, Result<IndexMap<String, TypedValue>, String>) {
    let bundles = root.join("bundles");
    if !bundles.exists() {
        write_bundles(&bundles, Path::new(BIN)).unwrap();
    }
    let bundle = Bundle::load(bundles.join(surrogate.tool())).unwrap();
    let inputs = build_input_set(&bundle.manifest, overrides).unwrap();
    let dir = prepare_run_dir(&bundle.manifest, &inputs, &root.join("runs"), &bundle.root).unwrap();
    let result = surrogate
        .run(&dir)
        .map_err(|e| e.to_string())
        .and_then(|()| collect_outputs(&bundle.manifest, &dir).map_err(|e| e.to_string()));
    (dir, result)
}

fn envelopes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir.join("_outputs"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn equal_inputs_give_identical_envelopes() {
    let tmp = tempfile::tempdir().unwrap();
    for s in [Surrogate::Melt, Surrogate::Pn] {
        let a: IndexMap<String, Value> = IndexMap::new();
        let (d1, r1) = run_inline(tmp.path(), s, &a);
        let (d2, r2) = run_inline(tmp.path(), s, &a);
        r1.unwrap();
        r2.unwrap();
        assert_ne!(d1, d2);
        assert_eq!(envelopes(&d1), envelopes(&d2), "{}", s.tool());
    }
}

#[test]
fn melt_defaults_coexist() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, out) = run_inline(tmp.path(), Surrogate::Melt, &IndexMap::new());
    let out = out.unwrap();
    assert_eq!(out["coexistence"], TypedValue::Boolean(true));
    assert_eq!(out["steady_state"], TypedValue::Boolean(true));
    let tm = out["melting_temperature"].as_f64().unwrap();
    assert!((tm - 1357.77).abs() < 10.0, "{tm}");
    let TypedValue::Dictionary(fractions) = &out["phase_fractions"] else { panic!() };
    let total: f64 = fractions.values().map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(fractions.contains_key("FCC") && fractions.contains_key("liquid"));
    assert!(matches!(out["final_snapshot"], TypedValue::Image(_)));
}

#[test]
fn short_run_is_not_steady() {
    // 2 ps is far shorter than the relaxation time
    let tmp = tempfile::tempdir().unwrap();
    let o: IndexMap<String, Value> =
        [("run_time", json!("2 ps")), ("T_solid", json!(100)), ("T_liquid", json!(300))]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
    let (_, out) = run_inline(tmp.path(), Surrogate::Melt, &o);
    assert_eq!(out.unwrap()["steady_state"], TypedValue::Boolean(false));
}

#[test]
fn pn_outputs_have_declared_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, out) = run_inline(tmp.path(), Surrogate::Pn, &IndexMap::new());
    let out = out.unwrap();
    let TypedValue::Array { value: iv, .. } = &out["iv_characteristic"] else { panic!() };
    assert_eq!(iv.shape(), [13, 2]);
    assert_eq!(iv.data()[1], 0.0, "I(0 V)");
    let TypedValue::Array { value: bands, .. } = &out["band_edges"] else { panic!() };
    assert_eq!(bands.shape()[1], 5);
    let TypedValue::Array { value: rho, .. } = &out["charge_density"] else { panic!() };
    assert_eq!(rho.shape()[0], bands.shape()[0]);
    let w = out["depletion_width"].as_f64().unwrap();
    assert!((0.3..0.6).contains(&w), "{w}");
}

#[test]
fn degenerate_sweep_fails_the_step() {
    let (_tmp, engine) = common::exemplar_home();
    for (start, stop, step) in [(0.0, 0.6, 0.0), (0.0, 0.6, -0.1), (0.6, 0.0, 0.1)] {
        let req = RunRequest::new(PN_TOOL)
            .set("v_start", start)
            .set("v_stop", stop)
            .set("v_step", step);
        match engine.run(&req) {
            Err(RunError::StepFailed { stderr_tail, .. }) => {
                assert!(stderr_tail.contains("degenerate voltage sweep"), "{stderr_tail}")
            }
            other => panic!("{start} {stop} {step}: {other:?}"),
        }
    }
}

#[test]
fn exemplar_runs_through_engine_and_cache() {
    let (tmp, engine) = common::exemplar_home();
    let first = engine.run(&RunRequest::new(MELT_TOOL).set("mass", "Ag")).unwrap();
    let hit = engine.run(&RunRequest::new(MELT_TOOL).set("mass", "silver")).unwrap();
    assert!(hit.record.cache_hit);
    assert_eq!(first.record.outputs, hit.record.outputs);
    let mut bypass = RunRequest::new(MELT_TOOL).set("mass", "Ag");
    bypass.cache = CachePolicy::BypassBoth;
    let again = engine.run(&bypass).unwrap();
    assert!(!again.record.cache_hit);
    assert_eq!(envelopes(&first.dir), envelopes(&again.dir));
    assert_eq!(common::cache_entries(&tmp.path().join("home/cache")), 1);
    assert_eq!(engine.db().len().unwrap(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn melt_always_writes_every_output(
        material in prop::sample::select(vec!["Al", "Cu", "Fe", "W", "Ti", "Pb"]),
        structure in prop::sample::select(vec!["FCC", "BCC", "HCP"]),
        lattice in 2.0f64..10.0,
        t_solid in 1.0f64..5000.0,
        t_liquid in 1.0f64..5000.0,
        run_time in 1000.0f64..100000.0,
    ) {
        let tmp = tempfile::tempdir().unwrap();
        let o: IndexMap<String, Value> = [
            ("material", json!(material)),
            ("crystal_structure", json!(structure)),
            ("lattice_constant", json!(lattice)),
            ("T_solid", json!(t_solid)),
            ("T_liquid", json!(t_liquid)),
            ("run_time", json!(run_time)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let (_, out) = run_inline(tmp.path(), Surrogate::Melt, &o);
        let out = out.map_err(TestCaseError::fail)?;
        prop_assert_eq!(out.len(), 6);
        prop_assert!(out["confidence_95"].as_f64().unwrap() >= 0.0);
    }

    #[test]
    fn pn_row_count_matches_sweep(
        material in prop::sample::select(vec!["Si", "Ge", "GaAs", "InP"]),
        na in 12.0f64..20.0,
        nd in 12.0f64..20.0,
        temperature in 200.0f64..500.0,
        start in -1.0f64..0.5,
        span in 0.0f64..1.0,
        step in 0.01f64..0.3,
        density in 0.05f64..3.0,
    ) {
        let tmp = tempfile::tempdir().unwrap();
        let o: IndexMap<String, Value> = [
            ("material", json!(material)),
            ("Na", json!(10f64.powf(na))),
            ("Nd", json!(10f64.powf(nd))),
            ("temperature", json!(temperature)),
            ("v_start", json!(start)),
            ("v_stop", json!(start + span)),
            ("v_step", json!(step)),
            ("p_mesh_density", json!(density)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let (_, out) = run_inline(tmp.path(), Surrogate::Pn, &o);
        let out = out.map_err(TestCaseError::fail)?;
        let TypedValue::Array { value: iv, .. } = &out["iv_characteristic"] else { panic!() };
        let expected = pn::sweep(start, start + span, step).unwrap().len();
        prop_assert_eq!(iv.shape()[0], expected);
        prop_assert!(out["depletion_width"].as_f64().unwrap() >= 0.0);
    }
}
