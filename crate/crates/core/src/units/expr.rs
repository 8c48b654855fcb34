use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::table::{resolve_symbol, Scale};
use super::{Dimension, UnitError};

/// One factor of a unit expression, e.g. the `cm^-3` in `1/cm^3`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct UnitTerm {
    pub prefix: Option<&'static str>,
    pub symbol: &'static str,
    pub exponent: i32,
}

impl fmt::Display for UnitTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.prefix.unwrap_or(""), self.symbol)?;
        if self.exponent != 1 {
            write!(f, "^{}", self.exponent)?;
        }
        Ok(())
    }
}

/// A parsed unit expression.
///
/// Keeps the text it was parsed from (so manifests round-trip unchanged) and
/// the normalized term list, which is what equality compares.
#[derive(Debug, Clone)]
pub struct UnitExpr {
    text: String,
    terms: Vec<UnitTerm>,
    scale: Scale,
    dimension: Dimension,
    offset: f64,
}

impl PartialEq for UnitExpr {
    fn eq(&self, other: &Self) -> bool {
        self.terms == other.terms
    }
}

impl Eq for UnitExpr {}

impl UnitExpr {
    pub fn dimensionless() -> Self {
        UnitExpr {
            text: String::new(),
            terms: Vec::new(),
            scale: Scale::ONE,
            dimension: Dimension::DIMENSIONLESS,
            offset: 0.0,
        }
    }

    /// The expression as written.
    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn terms(&self) -> &[UnitTerm] {
        &self.terms
    }

    /// Normalized spelling, e.g. `K*ps^-1` for `K / ps`.
    pub fn canonical(&self) -> String {
        self.terms
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("*")
    }

    /// Factor taking a value in this unit to SI base units.
    pub fn scale(&self) -> f64 {
        self.scale.value()
    }

    /// Affine offset added after scaling (non-zero only for `degC`).
    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn dimension(&self) -> Dimension {
        self.dimension
    }

    pub fn is_dimensionless(&self) -> bool {
        self.terms.is_empty()
    }

    /// Express a value given in `self` in `target` units.
    pub fn convert_value(&self, v: f64, target: &UnitExpr) -> Result<f64, UnitError> {
        if self.dimension != target.dimension {
            return Err(UnitError::DimensionMismatch {
                from: self.text.clone(),
                from_dim: self.dimension,
                to: target.text.clone(),
                to_dim: target.dimension,
            });
        }
        if self.terms == target.terms {
            return Ok(v);
        }
        if self.offset == 0.0 && target.offset == 0.0 {
            return Ok(self.scale.ratio_apply(target.scale, v));
        }
        let base = v * self.scale.value() + self.offset;
        Ok((base - target.offset) / target.scale.value())
    }

    /// Product of two expressions. Fails when either side is affine.
    pub fn mul(&self, other: &UnitExpr) -> Result<UnitExpr, UnitError> {
        let text = match (self.text.is_empty(), other.text.is_empty()) {
            (true, _) => other.text.clone(),
            (_, true) => self.text.clone(),
            _ => format!("{}*{}", self.text, other.text),
        };
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        build(text, terms)
    }

    pub fn powi(&self, n: i32) -> Result<UnitExpr, UnitError> {
        let terms = self
            .terms
            .iter()
            .map(|t| UnitTerm {
                exponent: t.exponent * n,
                ..t.clone()
            })
            .collect();
        build(format!("({})^{n}", self.text), terms)
    }
}

impl fmt::Display for UnitExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl FromStr for UnitExpr {
    type Err = UnitError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_unit(s)
    }
}

impl Serialize for UnitExpr {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for UnitExpr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_unit(&s).map_err(serde::de::Error::custom)
    }
}

fn build(text: String, raw_terms: Vec<UnitTerm>) -> Result<UnitExpr, UnitError> {
    // merge repeated factors, keeping first-appearance order
    let mut terms: Vec<UnitTerm> = Vec::with_capacity(raw_terms.len());
    for t in raw_terms {
        match terms
            .iter_mut()
            .find(|x| x.prefix == t.prefix && x.symbol == t.symbol)
        {
            Some(existing) => existing.exponent += t.exponent,
            None => terms.push(t),
        }
    }
    terms.retain(|t| t.exponent != 0);

    let mut scale = Scale::ONE;
    let mut dimension = Dimension::DIMENSIONLESS;
    let mut offset = 0.0;
    let mut affine = None;
    for t in &terms {
        let (prefix, def) = resolve_symbol(&format!("{}{}", t.prefix.unwrap_or(""), t.symbol))
            .expect("terms hold resolved symbols");
        let mut term_scale = def.scale;
        if let Some((_, exp)) = prefix {
            term_scale.exp10 += exp;
        }
        scale = scale.mul(term_scale.powi(t.exponent));
        dimension = dimension + def.dimension * t.exponent;
        if def.offset != 0.0 {
            affine = Some(def.symbol);
            offset = def.offset;
        }
    }
    if let Some(symbol) = affine {
        if terms.len() != 1 || terms[0].exponent != 1 {
            return Err(UnitError::AffineComposition {
                expr: text,
                unit: symbol.to_string(),
            });
        }
    }
    Ok(UnitExpr {
        text,
        terms,
        scale,
        dimension,
        offset,
    })
}

/// Parse a unit expression.
///
/// Grammar: `unit := term (('*'|'/') term)*`, `term := [prefix] symbol ['^' int]`.
/// Whitespace is ignored and the empty string is dimensionless.
pub fn parse_unit(expr: &str) -> Result<UnitExpr, UnitError> {
    let text = expr.trim().to_string();
    let chars: Vec<char> = expr.chars().filter(|c| !c.is_whitespace()).collect();
    if chars.is_empty() {
        return Ok(UnitExpr::dimensionless());
    }
    let grammar = |reason: &str| UnitError::Grammar {
        expr: text.clone(),
        reason: reason.to_string(),
    };

    let mut terms = Vec::new();
    let mut pos = 0;
    let mut sign = 1;
    loop {
        let start = pos;
        while pos < chars.len() && is_symbol_char(chars[pos]) {
            pos += 1;
        }
        if start == pos {
            return Err(grammar("expected a unit symbol"));
        }
        let symbol: String = chars[start..pos].iter().collect();
        let (prefix, def) = resolve_symbol(&symbol).ok_or_else(|| UnitError::UnknownUnit {
            expr: text.clone(),
            symbol: symbol.clone(),
        })?;

        let mut exponent = 1;
        if pos < chars.len() && chars[pos] == '^' {
            pos += 1;
            let exp_start = pos;
            if pos < chars.len() && (chars[pos] == '-' || chars[pos] == '+') {
                pos += 1;
            }
            let digits_start = pos;
            while pos < chars.len() && chars[pos].is_ascii_digit() {
                pos += 1;
            }
            if digits_start == pos {
                return Err(grammar("expected an integer exponent after '^'"));
            }
            let lit: String = chars[exp_start..pos].iter().collect();
            exponent = lit
                .parse::<i32>()
                .map_err(|_| grammar("exponent out of range"))?;
        }
        terms.push(UnitTerm {
            prefix: prefix.map(|(p, _)| p),
            symbol: def.symbol,
            exponent: sign * exponent,
        });

        if pos == chars.len() {
            break;
        }
        sign = match chars[pos] {
            '*' | '·' => 1,
            '/' => -1,
            c => return Err(grammar(&format!("unexpected character '{c}'"))),
        };
        pos += 1;
        if pos == chars.len() {
            return Err(grammar("expression ends with an operator"));
        }
    }
    build(text, terms)
}

fn is_symbol_char(c: char) -> bool {
    c.is_alphabetic() || c == '°'
}

/// Split a quantity string such as `"0.5 nm"` or `"1e16cm^-3"` into its
/// number and unit. A bare number yields a dimensionless unit.
pub fn parse_quantity(s: &str) -> Result<(f64, UnitExpr), UnitError> {
    let s = s.trim();
    let bad = || UnitError::BadQuantity(s.to_string());
    // longest prefix that is a float literal
    let mut split = None;
    for (idx, _) in s.char_indices().skip(1).chain(std::iter::once((s.len(), ' '))) {
        let head = &s[..idx];
        if is_float_literal(head) {
            if let Ok(v) = head.parse::<f64>() {
                split = Some((idx, v));
            }
        }
    }
    let (idx, value) = split.ok_or_else(bad)?;
    let unit = parse_unit(&s[idx..])?;
    Ok((value, unit))
}

// f64::from_str also accepts "inf", "nan" and "infinity"; quantity strings
// only take decimal literals.
fn is_float_literal(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | 'e' | 'E' | '+' | '-'))
}
