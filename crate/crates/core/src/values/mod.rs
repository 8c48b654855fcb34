//! Typed values and the validation pipeline.
//!
//! Raw input (JSON values, quantity strings such as `"0.5 nm"`, or
//! `{"file": "<path>"}` references) is coerced to the declared kind,
//! converted to the declared units, and only then bounds-checked.

mod image;

use std::fmt;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

pub use image::{ImageFormat, ImageValue};

use crate::manifest::{fmt_number, InputSpec, Kind, OutputSpec, ToolManifest};
use crate::units::{
    lookup_element, parse_quantity, parse_unit, ElementProperty, NumArray, UnitError, UnitExpr,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundSide {
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValueError {
    #[error("expected {expected}, got {found}")]
    TypeMismatch { expected: Kind, found: String },
    #[error("{}", out_of_range_message(*value, *side, *min, *max, units))]
    OutOfRange {
        /// The offending value after conversion to the declared units.
        value: f64,
        side: BoundSide,
        min: Option<f64>,
        max: Option<f64>,
        units: String,
    },
    #[error(transparent)]
    Unit(#[from] UnitError),
    #[error("'{value}' is not one of [{}]", options.join(", "))]
    UnknownChoice { value: String, options: Vec<String> },
    #[error("element {symbol} has no tabulated {property}")]
    MissingProperty {
        symbol: String,
        property: ElementProperty,
    },
    #[error("bad image: {0}")]
    BadImage(String),
    #[error("cannot read {path}: {reason}")]
    File { path: PathBuf, reason: String },
    #[error("'{0}' is not a declared input")]
    UnknownInputName(String),
    #[error("input '{0}' has no value and no default")]
    MissingInput(String),
    #[error("input '{name}': {source}")]
    Input {
        name: String,
        #[source]
        source: Box<ValueError>,
    },
}

impl ValueError {
    /// The innermost error, without the input-name annotation.
    pub fn root(&self) -> &ValueError {
        match self {
            ValueError::Input { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_dimension_mismatch(&self) -> bool {
        matches!(self.root(), ValueError::Unit(UnitError::DimensionMismatch { .. }))
    }
}

fn out_of_range_message(value: f64, side: BoundSide, min: Option<f64>, max: Option<f64>, units: &str) -> String {
    let sp = if units.is_empty() { "" } else { " " };
    let (rel, bound) = match side {
        BoundSide::Min => ("below the minimum", min),
        BoundSide::Max => ("above the maximum", max),
    };
    format!(
        "{}{sp}{units} is {rel} {}{sp}{units}; allowed range [{}, {}]{sp}{units}",
        fmt_number(value),
        bound.map(fmt_number).unwrap_or_default(),
        min.map_or("-inf".into(), fmt_number),
        max.map_or("inf".into(), fmt_number),
    )
}

/// The resolved value of an `Element` input.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementValue {
    /// Canonical symbol; absent when the user supplied the property directly.
    pub symbol: Option<String>,
    pub property: Option<(ElementProperty, f64)>,
}

/// A validated value of one of the ten kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum TypedValue {
    Boolean(bool),
    Integer(i64),
    Number { value: f64, units: Option<UnitExpr> },
    Array { value: NumArray, units: Option<UnitExpr> },
    Text(String),
    Choice(String),
    List(Vec<Value>),
    Dictionary(Map<String, Value>),
    Image(ImageValue),
    Element(ElementValue),
}

impl TypedValue {
    pub fn kind(&self) -> Kind {
        match self {
            TypedValue::Boolean(_) => Kind::Boolean,
            TypedValue::Integer(_) => Kind::Integer,
            TypedValue::Number { .. } => Kind::Number,
            TypedValue::Array { .. } => Kind::Array,
            TypedValue::Text(_) => Kind::Text,
            TypedValue::Choice(_) => Kind::Choice,
            TypedValue::List(_) => Kind::List,
            TypedValue::Dictionary(_) => Kind::Dictionary,
            TypedValue::Image(_) => Kind::Image,
            TypedValue::Element(_) => Kind::Element,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            TypedValue::Integer(i) => Some(*i as f64),
            TypedValue::Number { value, .. } => Some(*value),
            _ => None,
        }
    }

    pub fn units(&self) -> Option<&UnitExpr> {
        match self {
            TypedValue::Number { units, .. } | TypedValue::Array { units, .. } => units.as_ref(),
            _ => None,
        }
    }

    /// The raw form that re-validates to this value: bare JSON, or
    /// `{"value": v, "units": u}` for unit-bearing numbers and arrays.
    /// Images become a file reference to `image_path`.
    pub fn canonical_raw(&self, image_path: impl FnOnce(&ImageValue) -> String) -> Value {
        fn with_units(v: Value, units: &Option<UnitExpr>) -> Value {
            match units {
                Some(u) => json!({ "value": v, "units": u.as_str() }),
                None => v,
            }
        }
        match self {
            TypedValue::Boolean(b) => json!(b),
            TypedValue::Integer(i) => json!(i),
            TypedValue::Number { value, units } => with_units(json!(value), units),
            TypedValue::Array { value, units } => with_units(value.to_json(), units),
            TypedValue::Text(s) | TypedValue::Choice(s) => json!(s),
            TypedValue::List(items) => Value::Array(items.clone()),
            TypedValue::Dictionary(map) => Value::Object(map.clone()),
            TypedValue::Image(img) => json!({ "file": image_path(img) }),
            TypedValue::Element(e) => match (&e.symbol, e.property) {
                (Some(symbol), None) => json!(symbol),
                (symbol, Some((prop, v))) => json!({
                    "symbol": symbol,
                    "property": prop.name(),
                    "value": v,
                    "units": prop.units(),
                }),
                (None, None) => Value::Null,
            },
        }
    }

    /// Text for a single result-table cell (scalar kinds only).
    pub fn scalar_cell(&self) -> Option<Value> {
        match self {
            TypedValue::Boolean(b) => Some(json!(b)),
            TypedValue::Integer(i) => Some(json!(i)),
            TypedValue::Number { value, .. } => Some(json!(value)),
            TypedValue::Text(s) | TypedValue::Choice(s) => Some(json!(s)),
            TypedValue::Element(e) => Some(match (&e.symbol, e.property) {
                (Some(s), _) => json!(s),
                (None, Some((_, v))) => json!(v),
                (None, None) => Value::Null,
            }),
            _ => None,
        }
    }
}

impl fmt::Display for TypedValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let units = |u: &Option<UnitExpr>| {
            u.as_ref()
                .filter(|u| !u.is_dimensionless())
                .map(|u| format!(" {u}"))
                .unwrap_or_default()
        };
        match self {
            TypedValue::Boolean(b) => write!(f, "{b}"),
            TypedValue::Integer(i) => write!(f, "{i}"),
            TypedValue::Number { value, units: u } => write!(f, "{value}{}", units(u)),
            TypedValue::Array { value, units: u } => {
                write!(f, "array{:?}{}", value.shape(), units(u))
            }
            TypedValue::Text(s) | TypedValue::Choice(s) => f.write_str(s),
            TypedValue::List(items) => write!(f, "{}", Value::Array(items.clone())),
            TypedValue::Dictionary(map) => write!(f, "{}", Value::Object(map.clone())),
            TypedValue::Image(img) => write!(f, "{} image, {} bytes, sha256:{}", img.format, img.byte_len, img.sha256),
            TypedValue::Element(e) => match (&e.symbol, e.property) {
                (Some(s), Some((p, v))) => write!(f, "{s} ({p} = {v} {})", p.units()),
                (Some(s), None) => f.write_str(s),
                (None, Some((p, v))) => write!(f, "{p} = {v} {}", p.units()),
                (None, None) => f.write_str("?"),
            },
        }
    }
}

// Storage form used by the results database and cache:
// `{"type": "<Kind>", "value": ..., ...}`.
#[derive(Serialize, Deserialize)]
#[serde(tag = "type")]
enum StoredValue {
    Boolean {
        value: bool,
    },
    Integer {
        value: i64,
    },
    Number {
        value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        units: Option<UnitExpr>,
    },
    Array {
        shape: Vec<usize>,
        value: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        units: Option<UnitExpr>,
    },
    Text {
        value: String,
    },
    Choice {
        value: String,
    },
    List {
        value: Vec<Value>,
    },
    Dictionary {
        value: Map<String, Value>,
    },
    Image {
        sha256: String,
        format: ImageFormat,
        bytes: u64,
    },
    Element {
        value: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        property: Option<ElementProperty>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        property_value: Option<f64>,
    },
}

impl Serialize for TypedValue {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let stored = match self.clone() {
            TypedValue::Boolean(value) => StoredValue::Boolean { value },
            TypedValue::Integer(value) => StoredValue::Integer { value },
            TypedValue::Number { value, units } => StoredValue::Number { value, units },
            TypedValue::Array { value, units } => StoredValue::Array {
                shape: value.shape().to_vec(),
                value: value.data().to_vec(),
                units,
            },
            TypedValue::Text(value) => StoredValue::Text { value },
            TypedValue::Choice(value) => StoredValue::Choice { value },
            TypedValue::List(value) => StoredValue::List { value },
            TypedValue::Dictionary(value) => StoredValue::Dictionary { value },
            TypedValue::Image(img) => StoredValue::Image {
                sha256: img.sha256,
                format: img.format,
                bytes: img.byte_len,
            },
            TypedValue::Element(e) => StoredValue::Element {
                value: e.symbol,
                property: e.property.map(|p| p.0),
                property_value: e.property.map(|p| p.1),
            },
        };
        stored.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TypedValue {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Ok(match StoredValue::deserialize(deserializer)? {
            StoredValue::Boolean { value } => TypedValue::Boolean(value),
            StoredValue::Integer { value } => TypedValue::Integer(value),
            StoredValue::Number { value, units } => TypedValue::Number { value, units },
            StoredValue::Array { shape, value, units } => TypedValue::Array {
                value: NumArray::new(shape, value)
                    .ok_or_else(|| serde::de::Error::custom("array shape does not match data"))?,
                units,
            },
            StoredValue::Text { value } => TypedValue::Text(value),
            StoredValue::Choice { value } => TypedValue::Choice(value),
            StoredValue::List { value } => TypedValue::List(value),
            StoredValue::Dictionary { value } => TypedValue::Dictionary(value),
            StoredValue::Image { sha256, format, bytes } => {
                TypedValue::Image(ImageValue::metadata(sha256, format, bytes))
            }
            StoredValue::Element {
                value,
                property,
                property_value,
            } => TypedValue::Element(ElementValue {
                symbol: value,
                property: property.zip(property_value),
            }),
        })
    }
}

/// Where relative `{"file": ...}` references are resolved.
#[derive(Debug, Clone, Default)]
pub struct ValidationContext {
    pub base_dir: Option<PathBuf>,
}

impl ValidationContext {
    pub fn with_base_dir(dir: impl Into<PathBuf>) -> Self {
        ValidationContext {
            base_dir: Some(dir.into()),
        }
    }

    fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn read(&self, path: &str) -> Result<Vec<u8>, ValueError> {
        let resolved = self.resolve(path);
        std::fs::read(&resolved).map_err(|e| ValueError::File {
            path: resolved,
            reason: e.to_string(),
        })
    }
}

/// `true` for `{"file": "<path>"}` objects.
pub fn is_file_reference(raw: &Value) -> bool {
    file_reference(raw).is_some()
}

fn file_reference(raw: &Value) -> Option<&str> {
    match raw {
        Value::Object(map) if map.len() == 1 => map.get("file").and_then(Value::as_str),
        _ => None,
    }
}

/// Relative location of an image input inside a run directory.
pub fn image_input_path(name: &str, img: &ImageValue) -> String {
    format!("_inputs/{name}.{}", img.format.extension())
}

fn describe_raw(raw: &Value) -> String {
    let kind = match raw {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    };
    let mut text = raw.to_string();
    if text.len() > 60 {
        text.truncate(57);
        text.push_str("...");
    }
    format!("{kind} ({text})")
}

fn mismatch(expected: Kind, raw: &Value) -> ValueError {
    ValueError::TypeMismatch {
        expected,
        found: describe_raw(raw),
    }
}

fn finite(expected: Kind, v: f64) -> Result<f64, ValueError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ValueError::TypeMismatch {
            expected,
            found: format!("non-finite number {v}"),
        })
    }
}

/// Constraints beyond the kind itself.
struct Constraints<'a> {
    units: Option<&'a UnitExpr>,
    min: Option<f64>,
    max: Option<f64>,
    options: Option<&'a [String]>,
    property: Option<ElementProperty>,
}

/// Read a number given bare, as a quantity string, or as `{"value", "units"}`,
/// and express it in `declared` units. Bare numbers are taken as already in
/// the declared units.
fn number_in_units(raw: &Value, declared: Option<&UnitExpr>) -> Result<f64, ValueError> {
    let (value, given) = match raw {
        Value::Number(n) => (n.as_f64().ok_or_else(|| mismatch(Kind::Number, raw))?, None),
        Value::String(s) => {
            let (v, u) = parse_quantity(s).map_err(|e| match e {
                UnitError::BadQuantity(_) => mismatch(Kind::Number, raw),
                other => ValueError::Unit(other),
            })?;
            (v, (!u.is_dimensionless()).then_some(u))
        }
        Value::Object(map) => {
            let v = map
                .get("value")
                .and_then(Value::as_f64)
                .ok_or_else(|| mismatch(Kind::Number, raw))?;
            let u = match map.get("units") {
                None | Some(Value::Null) => None,
                Some(Value::String(u)) => Some(parse_unit(u)?),
                Some(_) => return Err(mismatch(Kind::Number, raw)),
            };
            if map.keys().any(|k| k != "value" && k != "units") {
                return Err(mismatch(Kind::Number, raw));
            }
            (v, u.filter(|u| !u.is_dimensionless()))
        }
        _ => return Err(mismatch(Kind::Number, raw)),
    };
    let value = finite(Kind::Number, value)?;
    convert_scalar(value, given.as_ref(), declared)
}

fn convert_scalar(value: f64, given: Option<&UnitExpr>, declared: Option<&UnitExpr>) -> Result<f64, ValueError> {
    match (given, declared) {
        (None, _) => Ok(value),
        (Some(g), Some(d)) => Ok(g.convert_value(value, d)?),
        (Some(g), None) => Ok(g.convert_value(value, &UnitExpr::dimensionless())?),
    }
}

fn check_bounds(value: f64, c: &Constraints<'_>) -> Result<(), ValueError> {
    let err = |side| ValueError::OutOfRange {
        value,
        side,
        min: c.min,
        max: c.max,
        units: c.units.map(|u| u.as_str().to_string()).unwrap_or_default(),
    };
    if c.min.is_some_and(|lo| value < lo) {
        return Err(err(BoundSide::Min));
    }
    if c.max.is_some_and(|hi| value > hi) {
        return Err(err(BoundSide::Max));
    }
    Ok(())
}

fn parse_numeric_table(text: &str) -> Option<NumArray> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().ok())
                .collect::<Option<Vec<f64>>>()
        })
        .collect::<Option<_>>()?;
    if rows.iter().all(|r| r.len() == 1) {
        NumArray::new(vec![rows.len()], rows.into_iter().flatten().collect())
    } else {
        NumArray::from_rows(&rows)
    }
}

fn coerce(kind: Kind, raw: &Value, c: &Constraints<'_>, ctx: &ValidationContext) -> Result<TypedValue, ValueError> {
    if let Some(path) = file_reference(raw) {
        return coerce_file(kind, path, c, ctx);
    }
    match kind {
        Kind::Boolean => raw.as_bool().map(TypedValue::Boolean).ok_or_else(|| mismatch(kind, raw)),
        Kind::Integer => {
            let n = raw.as_number().ok_or_else(|| mismatch(kind, raw))?;
            let value = match n.as_i64() {
                Some(i) => i,
                None => {
                    let f = finite(kind, n.as_f64().ok_or_else(|| mismatch(kind, raw))?)?;
                    if f.fract() != 0.0 || f < i64::MIN as f64 || f >= i64::MAX as f64 {
                        return Err(mismatch(kind, raw));
                    }
                    f as i64
                }
            };
            check_bounds(value as f64, c)?;
            Ok(TypedValue::Integer(value))
        }
        Kind::Number => {
            let value = number_in_units(raw, c.units)?;
            check_bounds(value, c)?;
            Ok(TypedValue::Number {
                value,
                units: c.units.cloned(),
            })
        }
        Kind::Array => {
            let (arr, given) = match raw {
                Value::Array(_) => (raw, None),
                Value::Object(map) if map.contains_key("value") => {
                    if map.keys().any(|k| k != "value" && k != "units") {
                        return Err(mismatch(kind, raw));
                    }
                    let u = match map.get("units") {
                        None | Some(Value::Null) => None,
                        Some(Value::String(u)) => Some(parse_unit(u)?),
                        Some(_) => return Err(mismatch(kind, raw)),
                    };
                    (&map["value"], u.filter(|u| !u.is_dimensionless()))
                }
                _ => return Err(mismatch(kind, raw)),
            };
            let array = NumArray::from_json(arr).ok_or_else(|| ValueError::TypeMismatch {
                expected: kind,
                found: "a ragged or non-numeric array".into(),
            })?;
            array_value(array, given.as_ref(), c)
        }
        Kind::Text => raw
            .as_str()
            .map(|s| TypedValue::Text(s.to_string()))
            .ok_or_else(|| mismatch(kind, raw)),
        Kind::Choice => {
            let s = raw.as_str().ok_or_else(|| mismatch(kind, raw))?;
            if let Some(options) = c.options {
                if !options.iter().any(|o| o == s) {
                    return Err(ValueError::UnknownChoice {
                        value: s.to_string(),
                        options: options.to_vec(),
                    });
                }
            }
            Ok(TypedValue::Choice(s.to_string()))
        }
        Kind::List => match raw {
            Value::Array(items) => Ok(TypedValue::List(items.clone())),
            _ => Err(mismatch(kind, raw)),
        },
        Kind::Dictionary => match raw {
            Value::Object(map) => Ok(TypedValue::Dictionary(map.clone())),
            _ => Err(mismatch(kind, raw)),
        },
        Kind::Image => Err(ValueError::BadImage(format!(
            "images must be given as {{\"file\": \"<path>\"}}, got {}",
            describe_raw(raw)
        ))),
        Kind::Element => coerce_element(raw, c),
    }
}

fn array_value(array: NumArray, given: Option<&UnitExpr>, c: &Constraints<'_>) -> Result<TypedValue, ValueError> {
    let array = array.try_map(|v| {
        let v = finite(Kind::Array, v)?;
        convert_scalar(v, given, c.units)
    })?;
    Ok(TypedValue::Array {
        value: array,
        units: c.units.cloned(),
    })
}

fn coerce_element(raw: &Value, c: &Constraints<'_>) -> Result<TypedValue, ValueError> {
    let from_symbol = |s: &str| -> Result<TypedValue, ValueError> {
        let record = lookup_element(s)?;
        let property = match c.property {
            None => None,
            Some(p) => Some((
                p,
                p.of(record).ok_or_else(|| ValueError::MissingProperty {
                    symbol: record.symbol.clone(),
                    property: p,
                })?,
            )),
        };
        Ok(TypedValue::Element(ElementValue {
            symbol: Some(record.symbol.clone()),
            property,
        }))
    };
    let from_number = |raw: &Value| -> Result<TypedValue, ValueError> {
        let p = c.property.ok_or_else(|| mismatch(Kind::Element, raw))?;
        let units = parse_unit(p.units()).expect("property units parse");
        let v = number_in_units(raw, Some(&units))?;
        Ok(TypedValue::Element(ElementValue {
            symbol: None,
            property: Some((p, v)),
        }))
    };
    match raw {
        Value::String(s) => match lookup_element(s) {
            Ok(_) => from_symbol(s),
            // "63.5 u" style quantities pass through as the property value
            Err(e) if c.property.is_some() && parse_quantity(s).is_ok() => {
                from_number(raw).map_err(|_| ValueError::Unit(e))
            }
            Err(e) => Err(e.into()),
        },
        Value::Number(_) => from_number(raw),
        Value::Object(map) => match map.get("symbol") {
            Some(Value::String(s)) => from_symbol(s),
            Some(Value::Null) | None if map.contains_key("value") => {
                let mut q = map.clone();
                q.remove("symbol");
                q.remove("property");
                from_number(&Value::Object(q))
            }
            _ => Err(mismatch(Kind::Element, raw)),
        },
        _ => Err(mismatch(Kind::Element, raw)),
    }
}

fn coerce_file(kind: Kind, path: &str, c: &Constraints<'_>, ctx: &ValidationContext) -> Result<TypedValue, ValueError> {
    let bytes = ctx.read(path)?;
    let as_text = |bytes: Vec<u8>| {
        String::from_utf8(bytes).map_err(|_| ValueError::File {
            path: ctx.resolve(path),
            reason: "not valid UTF-8".into(),
        })
    };
    let as_json = |bytes: &[u8]| {
        serde_json::from_slice::<Value>(bytes).map_err(|e| ValueError::File {
            path: ctx.resolve(path),
            reason: format!("not valid JSON: {e}"),
        })
    };
    match kind {
        Kind::Image => ImageValue::from_bytes(bytes)
            .map(TypedValue::Image)
            .ok_or_else(|| ValueError::BadImage(format!("{path}: not a PPM, PNG, JPEG, GIF, TIFF or BMP file"))),
        Kind::Text => Ok(TypedValue::Text(as_text(bytes)?)),
        Kind::List | Kind::Dictionary => {
            let v = as_json(&bytes)?;
            if is_file_reference(&v) {
                return Err(mismatch(kind, &v));
            }
            coerce(kind, &v, c, ctx)
        }
        Kind::Array => {
            let text = as_text(bytes)?;
            let array = match serde_json::from_str::<Value>(&text) {
                Ok(v @ Value::Array(_)) => NumArray::from_json(&v),
                _ => parse_numeric_table(&text),
            }
            .ok_or_else(|| ValueError::TypeMismatch {
                expected: kind,
                found: format!("file {path} without a rectangular numeric array"),
            })?;
            array_value(array, None, c)
        }
        _ => Err(ValueError::TypeMismatch {
            expected: kind,
            found: format!("a file reference ({path})"),
        }),
    }
}

/// Validate one raw input against its declaration.
pub fn validate_value(spec: &InputSpec, raw: &Value, ctx: &ValidationContext) -> Result<TypedValue, ValueError> {
    let c = Constraints {
        units: spec.units.as_ref(),
        min: spec.min,
        max: spec.max,
        options: spec.options.as_deref(),
        property: spec.property,
    };
    coerce(spec.kind, raw, &c, ctx)
}

/// Validate an output envelope `{"type": K, "value": v, "units": u}` (or
/// `{"type": "Image", "file": path}`); `ctx` resolves image paths.
pub fn validate_output(spec: &OutputSpec, envelope: &Value, ctx: &ValidationContext) -> Result<TypedValue, ValueError> {
    let obj = envelope.as_object().ok_or_else(|| mismatch(spec.kind, envelope))?;
    let declared = obj.get("type").and_then(Value::as_str).ok_or_else(|| ValueError::TypeMismatch {
        expected: spec.kind,
        found: "an envelope without a \"type\" field".into(),
    })?;
    if declared != spec.kind.name() {
        return Err(ValueError::TypeMismatch {
            expected: spec.kind,
            found: format!("an envelope of type {declared}"),
        });
    }
    let c = Constraints {
        units: spec.units.as_ref(),
        min: None,
        max: None,
        options: None,
        property: None,
    };
    if spec.kind == Kind::Image {
        let file = obj.get("file").and_then(Value::as_str).ok_or_else(|| {
            ValueError::BadImage("Image envelopes need a \"file\" field".into())
        })?;
        return coerce_file(Kind::Image, file, &c, ctx);
    }
    if let Some(file) = obj.get("file").and_then(Value::as_str) {
        return coerce_file(spec.kind, file, &c, ctx);
    }
    let value = obj.get("value").ok_or_else(|| ValueError::TypeMismatch {
        expected: spec.kind,
        found: "an envelope without a \"value\" field".into(),
    })?;
    let raw = match obj.get("units") {
        Some(u) if spec.kind.allows_units() => json!({ "value": value, "units": u }),
        _ => value.clone(),
    };
    coerce(spec.kind, &raw, &c, ctx)
}

/// A complete, validated assignment of every declared input.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InputSet(IndexMap<String, TypedValue>);

impl InputSet {
    pub fn get(&self, name: &str) -> Option<&TypedValue> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TypedValue)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The `inputs.json` object: canonical raw form of every input.
    pub fn to_raw_json(&self) -> Value {
        Value::Object(
            self.0
                .iter()
                .map(|(name, v)| (name.clone(), v.canonical_raw(|img| image_input_path(name, img))))
                .collect(),
        )
    }

    /// Re-validate a parsed `inputs.json` object against `m`.
    pub fn from_raw_json(m: &ToolManifest, raw: &Value, ctx: &ValidationContext) -> Result<InputSet, ValueError> {
        let obj = raw.as_object().ok_or_else(|| ValueError::TypeMismatch {
            expected: Kind::Dictionary,
            found: describe_raw(raw),
        })?;
        let overrides: IndexMap<String, Value> = obj.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let set = build_input_set_with(m, &overrides, ctx)?;
        if let Some(missing) = m.inputs.keys().find(|k| !obj.contains_key(*k)) {
            return Err(ValueError::MissingInput(missing.clone()));
        }
        Ok(set)
    }
}

impl FromIterator<(String, TypedValue)> for InputSet {
    fn from_iter<I: IntoIterator<Item = (String, TypedValue)>>(iter: I) -> Self {
        InputSet(iter.into_iter().collect())
    }
}

impl IntoIterator for InputSet {
    type Item = (String, TypedValue);
    type IntoIter = indexmap::map::IntoIter<String, TypedValue>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}

/// Manifest defaults overlaid with validated overrides.
pub fn build_input_set(m: &ToolManifest, overrides: &IndexMap<String, Value>) -> Result<InputSet, ValueError> {
    build_input_set_with(m, overrides, &ValidationContext::default())
}

/// As [`build_input_set`], resolving override file references in `ctx` and
/// default file references in `defaults_ctx`.
pub fn build_input_set_in(
    m: &ToolManifest,
    overrides: &IndexMap<String, Value>,
    ctx: &ValidationContext,
    defaults_ctx: &ValidationContext,
) -> Result<InputSet, ValueError> {
    if let Some(unknown) = overrides.keys().find(|k| !m.inputs.contains_key(*k)) {
        return Err(ValueError::UnknownInputName(unknown.clone()));
    }
    let mut values = IndexMap::with_capacity(m.inputs.len());
    for (name, spec) in &m.inputs {
        let annotate = |e: ValueError| ValueError::Input {
            name: name.clone(),
            source: Box::new(e),
        };
        let value = match (overrides.get(name), &spec.default) {
            (Some(raw), _) => validate_value(spec, raw, ctx).map_err(annotate)?,
            (None, Some(default)) => validate_value(spec, default, defaults_ctx).map_err(annotate)?,
            (None, None) => return Err(ValueError::MissingInput(name.clone())),
        };
        values.insert(name.clone(), value);
    }
    Ok(InputSet(values))
}

fn build_input_set_with(m: &ToolManifest, overrides: &IndexMap<String, Value>, ctx: &ValidationContext) -> Result<InputSet, ValueError> {
    build_input_set_in(m, overrides, ctx, ctx)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::manifest::parse_manifest;

    fn lattice_spec() -> InputSpec {
        InputSpec {
            units: Some(parse_unit("angstrom").unwrap()),
            min: Some(2.0),
            max: Some(10.0),
            ..InputSpec::new(Kind::Number)
        }
    }

    fn check(spec: &InputSpec, raw: Value) -> Result<TypedValue, ValueError> {
        validate_value(spec, &raw, &ValidationContext::default())
    }

    #[test]
    fn half_nanometre_lattice() {
        let v = check(&lattice_spec(), json!("0.5 nm")).unwrap();
        assert_eq!(v.as_f64(), Some(5.0));
        assert_eq!(v.units().unwrap().as_str(), "angstrom");
    }

    #[test]
    fn five_nanometres_out_of_range() {
        match check(&lattice_spec(), json!("5 nm")).unwrap_err() {
            ValueError::OutOfRange { value, side, max, .. } => {
                assert!((value - 50.0).abs() < 1e-12);
                assert_eq!(side, BoundSide::Max);
                assert_eq!(max, Some(10.0));
            }
            e => panic!("{e:?}"),
        }
        let msg = check(&lattice_spec(), json!("5 nm")).unwrap_err().to_string();
        assert!(msg.contains("50 angstrom"), "{msg}");
        assert!(msg.contains("[2, 10] angstrom"), "{msg}");
    }

    #[test]
    fn element_mass() {
        let spec = InputSpec {
            property: Some(ElementProperty::AtomicMass),
            ..InputSpec::new(Kind::Element)
        };
        let v = check(&spec, json!("Cu")).unwrap();
        assert_eq!(
            v,
            TypedValue::Element(ElementValue {
                symbol: Some("Cu".into()),
                property: Some((ElementProperty::AtomicMass, 63.546)),
            })
        );
        // names resolve to the canonical symbol
        assert_eq!(check(&spec, json!("copper")).unwrap(), v);
        let numeric = check(&spec, json!(63.5)).unwrap();
        assert_eq!(numeric.scalar_cell(), Some(json!(63.5)));
        assert!(matches!(check(&spec, json!("Xx")), Err(ValueError::Unit(UnitError::UnknownElement(_)))));

        let bare = InputSpec::new(Kind::Element);
        assert!(matches!(check(&bare, json!(63.5)), Err(ValueError::TypeMismatch { .. })));
    }

    #[test]
    fn crystal_choice() {
        let spec = InputSpec {
            options: Some(vec!["FCC".into(), "BCC".into(), "HCP".into()]),
            ..InputSpec::new(Kind::Choice)
        };
        assert_eq!(check(&spec, json!("FCC")).unwrap(), TypedValue::Choice("FCC".into()));
        assert!(matches!(check(&spec, json!("fcc")), Err(ValueError::UnknownChoice { .. })));
    }

    #[test]
    fn integers() {
        let spec = InputSpec {
            min: Some(1.0),
            max: Some(10.0),
            ..InputSpec::new(Kind::Integer)
        };
        assert_eq!(check(&spec, json!(5)).unwrap(), TypedValue::Integer(5));
        assert_eq!(check(&spec, json!(5.0)).unwrap(), TypedValue::Integer(5));
        assert!(matches!(check(&spec, json!(5.5)), Err(ValueError::TypeMismatch { .. })));
        assert!(matches!(check(&spec, json!(11)), Err(ValueError::OutOfRange { .. })));
        assert!(matches!(check(&spec, json!("5")), Err(ValueError::TypeMismatch { .. })));
    }

    #[test]
    fn non_finite_rejected() {
        let spec = InputSpec::new(Kind::Number);
        assert!(matches!(check(&spec, json!("NaN")), Err(ValueError::TypeMismatch { .. })));
        assert!(matches!(check(&spec, json!("inf")), Err(ValueError::TypeMismatch { .. })));
        assert!(matches!(check(&spec, json!("1e400")), Err(ValueError::TypeMismatch { .. })));
    }

    #[test]
    fn dimension_mismatch() {
        let err = check(&lattice_spec(), json!("5 K")).unwrap_err();
        assert!(err.is_dimension_mismatch(), "{err:?}");
        // units on a unitless Number must be dimensionless
        assert!(check(&InputSpec::new(Kind::Number), json!("5 m")).unwrap_err().is_dimension_mismatch());
    }

    #[test]
    fn arrays() {
        let spec = InputSpec {
            units: Some(parse_unit("nm").unwrap()),
            ..InputSpec::new(Kind::Array)
        };
        let v = check(&spec, json!({"value": [[1, 2], [3, 4]], "units": "angstrom"})).unwrap();
        match &v {
            TypedValue::Array { value, .. } => {
                assert_eq!(value.shape(), &[2, 2]);
                assert!((value.data()[3] - 0.4).abs() < 1e-15);
            }
            _ => unreachable!(),
        }
        assert!(check(&spec, json!([[1, 2], [3]])).is_err());
    }

    #[test]
    fn files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("t.txt"), "hello").unwrap();
        std::fs::write(dir.path().join("a.csv"), "1,2\n3,4\n").unwrap();
        std::fs::write(dir.path().join("l.json"), "[1, \"a\"]").unwrap();
        std::fs::write(dir.path().join("img.ppm"), b"P3\n1 1\n255\n0 0 0\n").unwrap();
        std::fs::write(dir.path().join("bad.img"), b"not an image").unwrap();
        let ctx = ValidationContext::with_base_dir(dir.path());
        let file = |p: &str| json!({ "file": p });
        assert_eq!(
            validate_value(&InputSpec::new(Kind::Text), &file("t.txt"), &ctx).unwrap(),
            TypedValue::Text("hello".into())
        );
        match validate_value(&InputSpec::new(Kind::Array), &file("a.csv"), &ctx).unwrap() {
            TypedValue::Array { value, .. } => assert_eq!(value.shape(), &[2, 2]),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            validate_value(&InputSpec::new(Kind::List), &file("l.json"), &ctx).unwrap(),
            TypedValue::List(vec![json!(1), json!("a")])
        );
        match validate_value(&InputSpec::new(Kind::Image), &file("img.ppm"), &ctx).unwrap() {
            TypedValue::Image(img) => assert_eq!(img.format, ImageFormat::Ppm),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            validate_value(&InputSpec::new(Kind::Image), &file("bad.img"), &ctx),
            Err(ValueError::BadImage(_))
        ));
        assert!(matches!(
            validate_value(&InputSpec::new(Kind::Text), &file("missing.txt"), &ctx),
            Err(ValueError::File { .. })
        ));
        assert!(validate_value(&InputSpec::new(Kind::Boolean), &file("t.txt"), &ctx).is_err());
    }

    fn kelvin_output() -> OutputSpec {
        OutputSpec {
            units: Some(parse_unit("K").unwrap()),
            ..OutputSpec::new(Kind::Number)
        }
    }

    #[test]
    fn output_envelopes() {
        let ctx = ValidationContext::default();
        let v = validate_output(&kelvin_output(), &json!({"type": "Number", "value": 1350, "units": "K"}), &ctx).unwrap();
        assert_eq!(v.as_f64(), Some(1350.0));
        // 1.35 kK = 1350 K by hand
        let v = validate_output(&kelvin_output(), &json!({"type": "Number", "value": 1.35, "units": "kK"}), &ctx).unwrap();
        assert!((v.as_f64().unwrap() - 1350.0).abs() <= 1350.0 * 1e-12);
        let v = validate_output(&OutputSpec::new(Kind::Boolean), &json!({"type": "Boolean", "value": true}), &ctx).unwrap();
        assert_eq!(v, TypedValue::Boolean(true));

        assert!(matches!(
            validate_output(&kelvin_output(), &json!({"type": "Integer", "value": 1}), &ctx),
            Err(ValueError::TypeMismatch { .. })
        ));
        assert!(validate_output(&kelvin_output(), &json!({"type": "Number", "value": 1, "units": "m"}), &ctx)
            .unwrap_err()
            .is_dimension_mismatch());
        assert!(matches!(
            validate_output(&OutputSpec::new(Kind::Image), &json!({"type": "Image", "value": 1}), &ctx),
            Err(ValueError::BadImage(_))
        ));
    }

    const TOOL: &str = "
name: demo
description: d
inputs:
  lattice_constant: {type: Number, units: angstrom, min: 2, max: 10, value: 3.6}
  run_time: {type: Number, units: fs, value: 50000}
  structure: {type: Choice, options: [FCC, BCC, HCP], value: FCC}
  steps: {type: Integer, min: 1, value: 10}
  flag: {type: Boolean, value: false}
  required: {type: Text}
outputs:
  t: {type: Number, units: K}
steps: [{name: s, command: [x]}]
";

    #[test]
    fn input_sets() {
        let m = parse_manifest(TOOL.as_bytes()).unwrap();
        let mut overrides = IndexMap::new();
        assert!(matches!(build_input_set(&m, &overrides), Err(ValueError::MissingInput(n)) if n == "required"));
        overrides.insert("required".to_string(), json!("x"));
        let defaults = build_input_set(&m, &overrides).unwrap();
        assert_eq!(defaults.get("run_time").unwrap().as_f64(), Some(50000.0));
        assert_eq!(defaults.len(), 6);

        let mut changed = overrides.clone();
        changed.insert("lattice_constant".into(), json!("4 angstrom"));
        let set = build_input_set(&m, &changed).unwrap();
        let diff: Vec<&String> = set
            .iter()
            .filter(|(k, v)| defaults.get(k) != Some(*v))
            .map(|(k, _)| k)
            .collect();
        assert_eq!(diff, ["lattice_constant"]);

        overrides.insert("not_an_input".into(), json!(1));
        assert!(matches!(build_input_set(&m, &overrides), Err(ValueError::UnknownInputName(n)) if n == "not_an_input"));

        let mut bad = changed.clone();
        bad.insert("lattice_constant".into(), json!("5 nm"));
        match build_input_set(&m, &bad).unwrap_err() {
            ValueError::Input { name, source } => {
                assert_eq!(name, "lattice_constant");
                assert!(matches!(*source, ValueError::OutOfRange { .. }));
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn raw_json_round_trip() {
        let m = parse_manifest(TOOL.as_bytes()).unwrap();
        let mut overrides = IndexMap::new();
        overrides.insert("required".to_string(), json!("x"));
        overrides.insert("lattice_constant".to_string(), json!("0.5 nm"));
        let set = build_input_set(&m, &overrides).unwrap();
        let raw = set.to_raw_json();
        assert_eq!(raw["lattice_constant"], json!({"value": 5.0, "units": "angstrom"}));
        assert_eq!(raw["steps"], json!(10));
        let back = InputSet::from_raw_json(&m, &raw, &ValidationContext::default()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn stored_form_round_trip() {
        let values = vec![
            TypedValue::Boolean(true),
            TypedValue::Integer(-3),
            TypedValue::Number { value: 5.0, units: Some(parse_unit("angstrom").unwrap()) },
            TypedValue::Array { value: NumArray::new(vec![2, 0], vec![]).unwrap(), units: None },
            TypedValue::Text("x".into()),
            TypedValue::Choice("FCC".into()),
            TypedValue::List(vec![json!(1)]),
            TypedValue::Dictionary(json!({"a": 1}).as_object().unwrap().clone()),
            TypedValue::Image(ImageValue::metadata("ab".repeat(32), ImageFormat::Png, 10)),
            TypedValue::Element(ElementValue { symbol: Some("Cu".into()), property: Some((ElementProperty::AtomicMass, 63.546)) }),
        ];
        for v in values {
            let s = serde_json::to_string(&v).unwrap();
            let back: TypedValue = serde_json::from_str(&s).unwrap();
            assert_eq!(back, v, "{s}");
        }
    }

    proptest! {
        #[test]
        fn bounds_are_inclusive(lo in -1e6f64..1e6, width in 0f64..1e6) {
            let hi = lo + width;
            let spec = InputSpec { min: Some(lo), max: Some(hi), ..InputSpec::new(Kind::Number) };
            prop_assert!(check(&spec, json!(lo)).is_ok());
            prop_assert!(check(&spec, json!(hi)).is_ok());
            let below = f64::from_bits(if lo > 0.0 { lo.to_bits() - 1 } else if lo == 0.0 { (-f64::MIN_POSITIVE).to_bits() } else { lo.to_bits() + 1 });
            let above = f64::from_bits(if hi > 0.0 { hi.to_bits() + 1 } else if hi == 0.0 { f64::MIN_POSITIVE.to_bits() } else { hi.to_bits() - 1 });
            prop_assert!(below < lo && above > hi);
            prop_assert!(matches!(check(&spec, json!(below)), Err(ValueError::OutOfRange { side: BoundSide::Min, .. })), "below");
            prop_assert!(matches!(check(&spec, json!(above)), Err(ValueError::OutOfRange { side: BoundSide::Max, .. })), "above");
        }

        #[test]
        fn unit_invariance(v in 2.0f64..10.0, unit in prop::sample::select(&["nm", "pm", "um", "m", "angstrom", "micron"][..])) {
            let spec = lattice_spec();
            let direct = check(&spec, json!(v)).unwrap().as_f64().unwrap();
            let declared = parse_unit("angstrom").unwrap();
            let other = parse_unit(unit).unwrap();
            let in_other = declared.convert_value(v, &other).unwrap();
            match check(&spec, json!({"value": in_other, "units": unit})) {
                Ok(via) => {
                    let via = via.as_f64().unwrap();
                    prop_assert!((via - direct).abs() <= 1e-12 * direct.abs(), "{via} vs {direct}");
                }
                // a conversion round trip may land one ulp outside a bound
                Err(ValueError::OutOfRange { value, .. }) => prop_assert!((value - direct).abs() <= 1e-12 * direct),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }

        #[test]
        fn canonical_raw_is_idempotent(v in -1e12f64..1e12, i in any::<i64>(), s in ".*") {
            let cases = [
                (InputSpec { units: Some(parse_unit("K").unwrap()), ..InputSpec::new(Kind::Number) }, json!({"value": v, "units": "degC"})),
                (InputSpec::new(Kind::Integer), json!(i)),
                (InputSpec::new(Kind::Text), json!(s)),
                (InputSpec::new(Kind::Array), json!([v, v / 3.0])),
            ];
            for (spec, raw) in cases {
                let first = check(&spec, raw).unwrap();
                let again = check(&spec, first.canonical_raw(|_| unreachable!())).unwrap();
                prop_assert_eq!(again, first);
            }
        }
    }
}
