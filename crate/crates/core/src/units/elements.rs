use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::UnitError;

const ELEMENTS_CSV: &str = include_str!("../../data/elements.csv");

/// One row of the bundled periodic table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementRecord {
    pub symbol: String,
    pub name: String,
    pub atomic_number: u32,
    #[serde(rename = "atomic_mass_u")]
    pub atomic_mass: f64,
    #[serde(rename = "covalent_radius_pm")]
    pub covalent_radius: Option<f64>,
    #[serde(rename = "density_g_cm3")]
    pub density: Option<f64>,
}

/// Element properties an `Element` input may request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementProperty {
    AtomicNumber,
    AtomicMass,
    CovalentRadius,
    Density,
}

impl ElementProperty {
    pub const ALL: [ElementProperty; 4] = [
        ElementProperty::AtomicNumber,
        ElementProperty::AtomicMass,
        ElementProperty::CovalentRadius,
        ElementProperty::Density,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ElementProperty::AtomicNumber => "atomic_number",
            ElementProperty::AtomicMass => "atomic_mass",
            ElementProperty::CovalentRadius => "covalent_radius",
            ElementProperty::Density => "density",
        }
    }

    /// Unit the property is tabulated in.
    pub fn units(self) -> &'static str {
        match self {
            ElementProperty::AtomicNumber => "",
            ElementProperty::AtomicMass => "u",
            ElementProperty::CovalentRadius => "pm",
            ElementProperty::Density => "g/cm^3",
        }
    }

    pub fn of(self, record: &ElementRecord) -> Option<f64> {
        match self {
            ElementProperty::AtomicNumber => Some(f64::from(record.atomic_number)),
            ElementProperty::AtomicMass => Some(record.atomic_mass),
            ElementProperty::CovalentRadius => record.covalent_radius,
            ElementProperty::Density => record.density,
        }
    }
}

impl fmt::Display for ElementProperty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ElementProperty {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ElementProperty::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown element property '{s}' (expected one of {})",
                    ElementProperty::ALL.map(|p| p.name()).join(", ")
                )
            })
    }
}

/// All 118 elements, ordered by atomic number.
pub fn elements() -> &'static [ElementRecord] {
    static TABLE: OnceLock<Vec<ElementRecord>> = OnceLock::new();
    TABLE.get_or_init(|| {
        csv::Reader::from_reader(ELEMENTS_CSV.as_bytes())
            .deserialize()
            .collect::<Result<Vec<ElementRecord>, _>>()
            .expect("bundled elements.csv is well-formed")
    })
}

/// Case-insensitive lookup by symbol or English name.
pub fn lookup_element(symbol_or_name: &str) -> Result<&'static ElementRecord, UnitError> {
    let key = symbol_or_name.trim();
    elements()
        .iter()
        .find(|e| e.symbol.eq_ignore_ascii_case(key) || e.name.eq_ignore_ascii_case(key))
        .ok_or_else(|| UnitError::UnknownElement(symbol_or_name.to_string()))
}
