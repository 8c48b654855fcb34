//! Abrupt P-N junction in the depletion approximation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use serde_json::json;

use super::{number, read_data, read_inputs, text, write_envelope, ExemplarError};

pub const DATA_FILE: &str = "materials.toml";

/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380649e-23;
/// Elementary charge, C.
pub const CHARGE: f64 = 1.602176634e-19;
/// Vacuum permittivity, F/cm.
pub const VACUUM_PERMITTIVITY: f64 = 8.8541878128e-14;

const CM_PER_UM: f64 = 1e-4;
const POINTS_PER_UM: f64 = 100.0;

#[derive(Debug, Clone, Deserialize)]
pub struct Material {
    /// Intrinsic carrier density at 300 K, cm^-3.
    pub ni: f64,
    /// eV.
    pub band_gap: f64,
    /// Relative permittivity.
    pub permittivity: f64,
    /// Electron and hole diffusivities, cm^2/s.
    pub dn: f64,
    pub dp: f64,
    /// cm.
    pub diffusion_length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnInputs {
    /// Microns.
    pub p_length: f64,
    pub n_length: f64,
    pub p_mesh_density: f64,
    pub n_mesh_density: f64,
    /// cm^-3.
    pub na: f64,
    pub nd: f64,
    pub material: String,
    /// Kelvin.
    pub temperature: f64,
    /// Volts.
    pub v_start: f64,
    pub v_stop: f64,
    pub v_step: f64,
}

impl PnInputs {
    pub fn from_json(inputs: &serde_json::Map<String, serde_json::Value>) -> Result<PnInputs, ExemplarError> {
        Ok(PnInputs {
            p_length: number(inputs, "p_length")?,
            n_length: number(inputs, "n_length")?,
            p_mesh_density: number(inputs, "p_mesh_density")?,
            n_mesh_density: number(inputs, "n_mesh_density")?,
            na: number(inputs, "Na")?,
            nd: number(inputs, "Nd")?,
            material: text(inputs, "material")?.to_string(),
            temperature: number(inputs, "temperature")?,
            v_start: number(inputs, "v_start")?,
            v_stop: number(inputs, "v_stop")?,
            v_step: number(inputs, "v_step")?,
        })
    }
}

/// Thermal voltage kT/q in volts.
pub fn thermal_voltage(temperature: f64) -> f64 {
    BOLTZMANN * temperature / CHARGE
}

/// Intrinsic density at `temperature`, scaled from its 300 K value.
pub fn intrinsic_density(m: &Material, temperature: f64) -> f64 {
    let eg_over_2k = m.band_gap * CHARGE / (2.0 * BOLTZMANN);
    m.ni * (temperature / 300.0).powf(1.5) * (-eg_over_2k * (1.0 / temperature - 1.0 / 300.0)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Junction {
    pub na: f64,
    pub nd: f64,
    /// Volts.
    pub thermal_voltage: f64,
    pub ni: f64,
    /// F/cm.
    pub permittivity: f64,
    pub built_in: f64,
    /// Saturation current density, A/cm^2.
    pub saturation: f64,
    pub band_gap: f64,
}

impl Junction {
    pub fn new(m: &Material, na: f64, nd: f64, temperature: f64) -> Junction {
        let vt = thermal_voltage(temperature);
        let ni = intrinsic_density(m, temperature);
        Junction {
            na,
            nd,
            thermal_voltage: vt,
            ni,
            permittivity: m.permittivity * VACUUM_PERMITTIVITY,
            built_in: vt * (na * nd / (ni * ni)).ln(),
            saturation: CHARGE * ni * ni * (m.dn / (m.diffusion_length * na) + m.dp / (m.diffusion_length * nd)),
            band_gap: m.band_gap,
        }
    }

    /// Depletion edges `(xp, xn)` in cm on the p and n side at bias `v`.
    /// Zero once `v` reaches the built-in potential.
    pub fn depletion_edges(&self, v: f64) -> (f64, f64) {
        let drop = (self.built_in - v).max(0.0);
        let w = (2.0 * self.permittivity * drop / CHARGE * (self.na + self.nd) / (self.na * self.nd)).sqrt();
        (w * self.nd / (self.na + self.nd), w * self.na / (self.na + self.nd))
    }

    pub fn depletion_width(&self, v: f64) -> f64 {
        let (xp, xn) = self.depletion_edges(v);
        xp + xn
    }

    /// Ideal-diode current density at bias `v`, A/cm^2.
    pub fn current(&self, v: f64) -> f64 {
        self.saturation * (v / self.thermal_voltage).exp_m1()
    }

    /// Electrostatic potential at `x` cm (junction at 0, p side negative)
    /// at zero bias, relative to the p-side bulk.
    pub fn potential(&self, x: f64) -> f64 {
        let (xp, xn) = self.depletion_edges(0.0);
        if x <= -xp {
            0.0
        } else if x <= 0.0 {
            CHARGE * self.na / (2.0 * self.permittivity) * (x + xp) * (x + xp)
        } else if x < xn {
            self.built_in - CHARGE * self.nd / (2.0 * self.permittivity) * (xn - x) * (xn - x)
        } else {
            self.built_in
        }
    }

    /// Space charge at `x` cm at zero bias, C/cm^3.
    pub fn charge(&self, x: f64) -> f64 {
        let (xp, xn) = self.depletion_edges(0.0);
        if x > -xp && x <= 0.0 {
            -CHARGE * self.na
        } else if x > 0.0 && x < xn {
            CHARGE * self.nd
        } else {
            0.0
        }
    }

    /// `[Ec, Ev, Ei, Ef]` in eV at `x` cm, with the Fermi level at zero.
    pub fn bands(&self, x: f64) -> [f64; 4] {
        let ei = self.thermal_voltage * (self.na / self.ni).ln() - self.potential(x);
        [ei + 0.5 * self.band_gap, ei - 0.5 * self.band_gap, ei, 0.0]
    }
}

/// Sweep voltages from `start` to `stop` inclusive in steps of `step`.
pub fn sweep(start: f64, stop: f64, step: f64) -> Result<Vec<f64>, ExemplarError> {
    if !(step > 0.0) || stop < start || !start.is_finite() || !stop.is_finite() {
        return Err(ExemplarError::DegenerateSweep { start, stop, step });
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}

/// Mesh positions in microns from `-p_length` to `n_length`.
pub fn mesh(inputs: &PnInputs) -> Vec<f64> {
    let region = |len: f64, density: f64| ((POINTS_PER_UM * density * len).round() as usize).max(2);
    let np = region(inputs.p_length, inputs.p_mesh_density);
    let nn = region(inputs.n_length, inputs.n_mesh_density);
    let mut x: Vec<f64> = (0..np).map(|i| -inputs.p_length + inputs.p_length * i as f64 / np as f64).collect();
    x.extend((0..=nn).map(|i| inputs.n_length * i as f64 / nn as f64));
    x
}

pub(super) fn run(dir: &Path) -> Result<(), ExemplarError> {
    let inputs = PnInputs::from_json(&read_inputs(dir)?)?;
    let materials: BTreeMap<String, Material> = read_data(dir, DATA_FILE)?;
    let material = materials.get(&inputs.material).ok_or_else(|| ExemplarError::Data {
        file: DATA_FILE.into(),
        reason: format!("no entry for '{}'", inputs.material),
    })?;
    let voltages = sweep(inputs.v_start, inputs.v_stop, inputs.v_step)?;
    let j = Junction::new(material, inputs.na, inputs.nd, inputs.temperature);

    let iv: Vec<[f64; 2]> = voltages.iter().map(|&v| [v, j.current(v)]).collect();
    let x = mesh(&inputs);
    let bands: Vec<[f64; 5]> = x
        .iter()
        .map(|&xu| {
            let [ec, ev, ei, ef] = j.bands(xu * CM_PER_UM);
            [xu, ec, ev, ei, ef]
        })
        .collect();
    let charge: Vec<[f64; 2]> = x.iter().map(|&xu| [xu, j.charge(xu * CM_PER_UM)]).collect();

    write_envelope(dir, "iv_characteristic", json!({"type": "Array", "value": iv}))?;
    write_envelope(dir, "band_edges", json!({"type": "Array", "value": bands}))?;
    write_envelope(dir, "charge_density", json!({"type": "Array", "value": charge}))?;
    write_envelope(
        dir,
        "depletion_width",
        json!({"type": "Number", "value": j.depletion_width(0.0) / CM_PER_UM, "units": "um"}),
    )
}
