//! Dimensional analysis and unit conversion.
//!
//! Unit expressions are parsed against a small curated table (SI base units,
//! Å, eV, V, u, minute, hour and the SI prefixes) into a [`UnitExpr`] that
//! carries its scale to SI base units, its [`Dimension`] and, for `degC`
//! only, an affine offset. The bundled periodic table backs the `Element`
//! input kind.

mod dimension;
mod elements;
mod expr;
mod table;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dimension::{Dimension, BASE_DIMENSIONS};
pub use elements::{elements, lookup_element, ElementProperty, ElementRecord};
pub use expr::{parse_quantity, parse_unit, UnitExpr, UnitTerm};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UnitError {
    #[error("unknown unit '{symbol}' in '{expr}'")]
    UnknownUnit { expr: String, symbol: String },
    #[error("cannot parse unit expression '{expr}': {reason}")]
    Grammar { expr: String, reason: String },
    #[error("'{unit}' has an offset and cannot be combined with other units (in '{expr}')")]
    AffineComposition { expr: String, unit: String },
    #[error("cannot convert '{from}' [{from_dim}] to '{to}' [{to_dim}]")]
    DimensionMismatch {
        from: String,
        from_dim: Dimension,
        to: String,
        to_dim: Dimension,
    },
    #[error("not a quantity: '{0}'")]
    BadQuantity(String),
    #[error("unknown element '{0}'")]
    UnknownElement(String),
}

/// A rectangular array of finite numbers stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NumArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Option<Self> {
        (shape.iter().product::<usize>() == data.len()).then_some(NumArray { shape, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Option<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return None;
        }
        let data = rows.iter().flatten().copied().collect();
        NumArray::new(vec![rows.len(), cols], data)
    }

    /// Read a nested JSON array. Returns `None` for ragged input or
    /// non-numeric leaves.
    pub fn from_json(value: &serde_json::Value) -> Option<Self> {
        fn shape_of(v: &serde_json::Value, shape: &mut Vec<usize>) {
            if let serde_json::Value::Array(items) = v {
                shape.push(items.len());
                if let Some(first) = items.first() {
                    shape_of(first, shape);
                }
            }
        }
        fn fill(v: &serde_json::Value, shape: &[usize], out: &mut Vec<f64>) -> bool {
            match (v, shape.split_first()) {
                (serde_json::Value::Array(items), Some((&n, rest))) => {
                    items.len() == n && items.iter().all(|i| fill(i, rest, out))
                }
                (serde_json::Value::Number(n), None) => match n.as_f64() {
                    Some(x) => {
                        out.push(x);
                        true
                    }
                    None => false,
                },
                _ => false,
            }
        }
        if !value.is_array() {
            return None;
        }
        let mut shape = Vec::new();
        shape_of(value, &mut shape);
        let mut data = Vec::new();
        fill(value, &shape, &mut data).then_some(NumArray { shape, data })
    }

    pub fn to_json(&self) -> serde_json::Value {
        fn build(shape: &[usize], data: &[f64]) -> serde_json::Value {
            match shape.split_first() {
                None => serde_json::json!(data[0]),
                Some((&n, rest)) => {
                    let stride: usize = rest.iter().product();
                    serde_json::Value::Array(
                        (0..n)
                            .map(|i| build(rest, &data[i * stride..(i + 1) * stride]))
                            .collect(),
                    )
                }
            }
        }
        build(&self.shape, &self.data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn map(&self, f: impl FnMut(f64) -> f64) -> NumArray {
        NumArray {
            shape: self.shape.clone(),
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    pub fn try_map<E>(&self, f: impl FnMut(f64) -> Result<f64, E>) -> Result<NumArray, E> {
        Ok(NumArray {
            shape: self.shape.clone(),
            data: self.data.iter().copied().map(f).collect::<Result<_, _>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Magnitude {
    Scalar(f64),
    Array(NumArray),
}

/// A number or array paired with its unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantity {
    pub value: Magnitude,
    pub unit: UnitExpr,
}

impl Quantity {
    pub fn scalar(value: f64, unit: UnitExpr) -> Self {
        Quantity {
            value: Magnitude::Scalar(value),
            unit,
        }
    }

    pub fn array(value: NumArray, unit: UnitExpr) -> Self {
        Quantity {
            value: Magnitude::Array(value),
            unit,
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self.value {
            Magnitude::Scalar(v) => Some(v),
            Magnitude::Array(_) => None,
        }
    }
}

/// Express `q` in `target` units, elementwise for arrays.
pub fn convert(q: &Quantity, target: &UnitExpr) -> Result<Quantity, UnitError> {
    let value = match &q.value {
        Magnitude::Scalar(v) => Magnitude::Scalar(q.unit.convert_value(*v, target)?),
        Magnitude::Array(a) => Magnitude::Array(a.try_map(|v| q.unit.convert_value(v, target))?),
    };
    Ok(Quantity {
        value,
        unit: target.clone(),
    })
}

pub fn dimension_of(u: &UnitExpr) -> Dimension {
    u.dimension()
}
