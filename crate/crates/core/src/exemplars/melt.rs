//! Coexistence melting surrogate.
//!
//! A closed-form relaxation model stands in for the MD run; the analysis
//! applied to the resulting trace is the real one.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{number, read_data, read_inputs, text, write_envelope, ExemplarError};
use crate::cache::canonical_json;

pub const DATA_FILE: &str = "metals.toml";

/// Inclusive bounds on each phase fraction for a valid coexistence run.
pub const COEXISTENCE_BAND: (f64, f64) = (0.35, 0.65);
/// Largest temperature drift (K/ps) still counted as steady.
pub const MAX_STEADY_SLOPE: f64 = 10.0;
/// Length of the analysis window at the end of the trace, in ps.
pub const WINDOW_PS: f64 = 20.0;

const ATOMS: u32 = 4000;
const DT_PS: f64 = 0.1;
const COPPER_MASS: f64 = 63.546;
const BASE_TAU_PS: f64 = 6.0;

#[derive(Debug, Clone, Deserialize)]
pub struct Metal {
    pub structure: String,
    pub lattice_constant: f64,
    pub melting_point: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeltInputs {
    pub material: String,
    /// Atomic mass in u.
    pub mass: f64,
    pub crystal_structure: String,
    /// Angstrom.
    pub lattice_constant: f64,
    pub t_solid: f64,
    pub t_liquid: f64,
    /// Femtoseconds.
    pub run_time: f64,
}

impl MeltInputs {
    pub fn from_json(inputs: &serde_json::Map<String, Value>) -> Result<MeltInputs, ExemplarError> {
        let mass = inputs.get("mass").and_then(|m| m.get("value").unwrap_or(m).as_f64());
        Ok(MeltInputs {
            material: text(inputs, "material")?.to_string(),
            mass: mass.ok_or_else(|| ExemplarError::Inputs("'mass' has no atomic mass value".into()))?,
            crystal_structure: text(inputs, "crystal_structure")?.to_string(),
            lattice_constant: number(inputs, "lattice_constant")?,
            t_solid: number(inputs, "T_solid")?,
            t_liquid: number(inputs, "T_liquid")?,
            run_time: number(inputs, "run_time")?,
        })
    }
}

/// Atom counts by local structure at the end of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseCounts {
    pub solid: u32,
    pub liquid: u32,
    pub other: u32,
}

impl PhaseCounts {
    pub fn total(self) -> u32 {
        self.solid + self.liquid + self.other
    }

    pub fn fractions(self) -> (f64, f64, f64) {
        let n = f64::from(self.total());
        (
            f64::from(self.solid) / n,
            f64::from(self.liquid) / n,
            f64::from(self.other) / n,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// Picoseconds, increasing.
    pub time: Vec<f64>,
    /// Kelvin.
    pub temperature: Vec<f64>,
    pub final_phases: PhaseCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeltAnalysis {
    pub melting_temperature: f64,
    pub confidence_95: f64,
    /// K/ps over the analysis window.
    pub slope: f64,
    pub coexistence: bool,
    pub steady_state: bool,
    pub solid_fraction: f64,
    pub liquid_fraction: f64,
    pub other_fraction: f64,
}

pub fn coexistence(solid_fraction: f64, liquid_fraction: f64) -> bool {
    let (lo, hi) = COEXISTENCE_BAND;
    (lo..=hi).contains(&solid_fraction) && (lo..=hi).contains(&liquid_fraction)
}

pub fn steady_state(slope: f64) -> bool {
    slope.abs() <= MAX_STEADY_SLOPE
}

/// Ordinary least-squares slope of `y` against `x`.
pub fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (xi, yi) in x.iter().zip(y) {
        sxy += (xi - mx) * (yi - my);
        sxx += (xi - mx) * (xi - mx);
    }
    sxy / sxx
}

/// Apply the analysis rules to the last [`WINDOW_PS`] of `trace`.
pub fn analyze(trace: &Trace) -> MeltAnalysis {
    let end = trace.time.last().copied().unwrap_or(0.0);
    let start = trace.time.partition_point(|&t| t < end - WINDOW_PS);
    let t = &trace.time[start..];
    let temp = &trace.temperature[start..];
    let n = temp.len() as f64;
    let mean = temp.iter().sum::<f64>() / n;
    let var = temp.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let slope = least_squares_slope(t, temp);
    let (solid, liquid, other) = trace.final_phases.fractions();
    MeltAnalysis {
        melting_temperature: mean,
        confidence_95: 1.96 * var.sqrt() / n.sqrt(),
        slope,
        coexistence: coexistence(solid, liquid),
        steady_state: steady_state(slope),
        solid_fraction: solid,
        liquid_fraction: liquid,
        other_fraction: other,
    }
}

/// Melting point of the modelled crystal: the reference value lowered by
/// lattice strain and by a structure other than the reference one.
pub fn effective_melting_point(inputs: &MeltInputs, metal: &Metal) -> f64 {
    let strain = (inputs.lattice_constant - metal.lattice_constant) / metal.lattice_constant;
    let mismatch = if inputs.crystal_structure == metal.structure { 1.0 } else { 0.9 };
    metal.melting_point * (-4.0 * strain * strain).exp() * mismatch
}

/// Generate the temperature trace and final phase counts. `seed` fixes the
/// fluctuations.
pub fn simulate(inputs: &MeltInputs, metal: &Metal, seed: [u8; 32]) -> Trace {
    let mut rng = ChaCha8Rng::from_seed(seed);
    let tm = effective_melting_point(inputs, metal);
    let t0 = 0.5 * (inputs.t_solid + inputs.t_liquid);
    // latent heat in temperature units
    let latent = 0.25 * tm;
    let (solid_final, t_final) = if (t0 - tm).abs() <= 0.5 * latent {
        (0.5 - (t0 - tm) / latent, tm)
    } else if t0 > tm {
        (0.0, t0 - 0.5 * latent)
    } else {
        (1.0, t0 + 0.5 * latent)
    };
    let tau = BASE_TAU_PS * (inputs.mass / COPPER_MASS).sqrt();
    let noise = Normal::new(0.0, 0.004 * t_final).expect("positive spread");

    let steps = (inputs.run_time / 1000.0 / DT_PS).round() as usize;
    let mut time = Vec::with_capacity(steps + 1);
    let mut temperature = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = i as f64 * DT_PS;
        let relax = (-t / tau).exp();
        time.push(t);
        temperature.push(t_final + (t0 - t_final) * relax + noise.sample(&mut rng));
    }

    let end = time.last().copied().unwrap_or(0.0);
    let solid_now = solid_final + (0.5 - solid_final) * (-end / tau).exp();
    let other = ATOMS / 100 + rng.gen_range(0..ATOMS / 100);
    let ordered = ATOMS - other;
    let solid = (solid_now * f64::from(ordered)).round() as u32;
    Trace {
        time,
        temperature,
        final_phases: PhaseCounts {
            solid,
            liquid: ordered - solid,
            other,
        },
    }
}

/// Deterministic seed derived from the canonical form of `inputs.json`.
pub fn seed(inputs: &serde_json::Map<String, Value>) -> [u8; 32] {
    Sha256::digest(canonical_json(&Value::Object(inputs.clone()))).into()
}

/// Grayscale PNG of the final cell: a lattice of atoms on the solid side,
/// scattered atoms on the liquid side.
pub fn render_snapshot(phases: PhaseCounts, seed: [u8; 32]) -> Result<Vec<u8>, ExemplarError> {
    const W: usize = 96;
    const H: usize = 48;
    let mut rng = ChaCha8Rng::from_seed(seed);
    let mut pixels = vec![255u8; W * H];
    let (solid, _, _) = phases.fractions();
    let boundary = (solid * W as f64).round() as usize;
    let mut dot = |x: usize, y: usize, shade: u8| {
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            if x + dx < W && y + dy < H {
                pixels[(y + dy) * W + x + dx] = shade;
            }
        }
    };
    for y in (1..H).step_by(4) {
        for x in (1..boundary).step_by(4) {
            dot(x, y, 40);
        }
    }
    let liquid_atoms = (W - boundary) * H / 16;
    for _ in 0..liquid_atoms {
        let x = rng.gen_range(boundary..W.max(boundary + 1));
        let y = rng.gen_range(0..H);
        dot(x, y, 120);
    }

    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, W as u32, H as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let image_err = |e: png::EncodingError| ExemplarError::Image(e.to_string());
    let mut writer = enc.write_header().map_err(image_err)?;
    writer.write_image_data(&pixels).map_err(image_err)?;
    writer.finish().map_err(image_err)?;
    Ok(out)
}

pub(super) fn run(dir: &Path) -> Result<(), ExemplarError> {
    let raw = read_inputs(dir)?;
    let inputs = MeltInputs::from_json(&raw)?;
    let metals: BTreeMap<String, Metal> = read_data(dir, DATA_FILE)?;
    let metal = metals.get(&inputs.material).ok_or_else(|| ExemplarError::Data {
        file: DATA_FILE.into(),
        reason: format!("no entry for '{}'", inputs.material),
    })?;
    let seed = seed(&raw);
    let trace = simulate(&inputs, metal, seed);
    let a = analyze(&trace);

    let snapshot = render_snapshot(trace.final_phases, seed)?;
    let png_path = dir.join("_outputs").join("final_snapshot.png");
    std::fs::write(&png_path, snapshot).map_err(super::io_err(&png_path))?;

    write_envelope(dir, "melting_temperature", json!({"type": "Number", "value": a.melting_temperature, "units": "K"}))?;
    write_envelope(dir, "confidence_95", json!({"type": "Number", "value": a.confidence_95, "units": "K"}))?;
    write_envelope(dir, "coexistence", json!({"type": "Boolean", "value": a.coexistence}))?;
    write_envelope(dir, "steady_state", json!({"type": "Boolean", "value": a.steady_state}))?;
    let mut fractions = serde_json::Map::new();
    fractions.insert(inputs.crystal_structure.clone(), json!(a.solid_fraction));
    fractions.insert("liquid".into(), json!(a.liquid_fraction));
    fractions.insert("other".into(), json!(a.other_fraction));
    write_envelope(dir, "phase_fractions", json!({"type": "Dictionary", "value": fractions}))?;
    write_envelope(dir, "final_snapshot", json!({"type": "Image", "file": "final_snapshot.png"}))
}
