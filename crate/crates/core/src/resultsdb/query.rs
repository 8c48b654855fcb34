//! Query predicates: a conjunction of `(field, operator, operand)` atoms.

use std::fmt;
use std::str::FromStr;

use serde_json::Value;

use super::{Cell, DbError, Entry};
use crate::manifest::{Kind, RevisionTag, ToolManifest};
use crate::record::RunStatus;
use crate::units::{lookup_element, parse_quantity, UnitExpr};
use crate::values::TypedValue;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FieldPath {
    Tool,
    Revision,
    Status,
    Input(String),
    Output(String),
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldPath::Tool => f.write_str("tool"),
            FieldPath::Revision => f.write_str("revision"),
            FieldPath::Status => f.write_str("status"),
            FieldPath::Input(n) => write!(f, "input.{n}"),
            FieldPath::Output(n) => write!(f, "output.{n}"),
        }
    }
}

impl FromStr for FieldPath {
    type Err = DbError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let named = |n: &str| !n.is_empty();
        match s {
            "tool" => Ok(FieldPath::Tool),
            "revision" => Ok(FieldPath::Revision),
            "status" => Ok(FieldPath::Status),
            _ => match (s.strip_prefix("input."), s.strip_prefix("output.")) {
                (Some(n), _) if named(n) => Ok(FieldPath::Input(n.to_string())),
                (_, Some(n)) if named(n) => Ok(FieldPath::Output(n.to_string())),
                _ => Err(DbError::UnknownField(s.to_string())),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    In,
}

impl Op {
    fn is_ordering(self) -> bool {
        matches!(self, Op::Lt | Op::Le | Op::Gt | Op::Ge)
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Eq => "=",
            Op::Ne => "!=",
            Op::Lt => "<",
            Op::Le => "<=",
            Op::Gt => ">",
            Op::Ge => ">=",
            Op::In => "in",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub field: FieldPath,
    pub op: Op,
    pub operand: Value,
}

/// Conjunction of atoms; the empty predicate matches every record.
///
/// Semantics: a record lacking the field (e.g. an output of a failed run)
/// satisfies no atom on that field, `!=` included. `status = "failed"`
/// matches any failure class. Ordering operators apply to Number and
/// Integer fields only; Number operands may carry any compatible unit and
/// are converted to the declared units first. Array, List, Dictionary and
/// Image fields compare by their `sha256:<hex>` reference.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryPredicate {
    pub atoms: Vec<Atom>,
}

impl QueryPredicate {
    pub fn all() -> Self {
        QueryPredicate::default()
    }

    pub fn and(mut self, field: &str, op: Op, operand: impl Into<Value>) -> Result<Self, DbError> {
        self.atoms.push(Atom {
            field: field.parse()?,
            op,
            operand: operand.into(),
        });
        Ok(self)
    }

    /// Parse `field OP literal (AND field OP literal)*`. Literals are JSON
    /// when they parse as JSON and plain text otherwise.
    pub fn parse(expr: &str) -> Result<Self, DbError> {
        let mut p = QueryPredicate::default();
        if expr.trim().is_empty() {
            return Ok(p);
        }
        for part in split_and(expr) {
            p.atoms.push(parse_atom(part.trim())?);
        }
        Ok(p)
    }

    /// The tool this predicate is pinned to by a `tool = X` atom.
    pub fn tool(&self) -> Option<&str> {
        self.atoms.iter().find_map(|a| match (&a.field, a.op, &a.operand) {
            (FieldPath::Tool, Op::Eq, Value::String(s)) => Some(s.as_str()),
            _ => None,
        })
    }

    fn revision(&self) -> Option<RevisionTag> {
        self.atoms.iter().find_map(|a| match (&a.field, a.op, &a.operand) {
            (FieldPath::Revision, Op::Eq, Value::String(s)) => s.parse().ok(),
            _ => None,
        })
    }

    pub(super) fn compile(&self, schema: Option<&ToolManifest>) -> Result<Compiled, DbError> {
        // a schema only applies to the tool the predicate is pinned to
        let schema = schema.filter(|m| self.tool() == Some(m.name.as_str()));
        let atoms = self
            .atoms
            .iter()
            .map(|a| compile_atom(a, schema))
            .collect::<Result<_, _>>()?;
        Ok(Compiled {
            tool: self.tool().map(str::to_string),
            revision: self.revision(),
            atoms,
        })
    }
}

fn split_and(expr: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut in_quotes = false;
    let mut start = 0;
    let bytes = expr.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'"' => in_quotes = !in_quotes,
            b'\\' if in_quotes => i += 1,
            b'A' if !in_quotes
                && expr[i..].starts_with("AND")
                && i > 0
                && bytes[i - 1].is_ascii_whitespace()
                && bytes.get(i + 3).is_some_and(u8::is_ascii_whitespace) =>
            {
                parts.push(&expr[start..i]);
                start = i + 3;
                i += 3;
                continue;
            }
            _ => {}
        }
        i += 1;
    }
    parts.push(&expr[start..]);
    parts
}

fn parse_atom(s: &str) -> Result<Atom, DbError> {
    let bad = |reason: &str| DbError::BadPredicate(format!("'{s}': {reason}"));
    let field_end = s
        .find(|c: char| c.is_whitespace() || "=!<>".contains(c))
        .ok_or_else(|| bad("expected `field OP literal`"))?;
    let field: FieldPath = s[..field_end].parse()?;
    let rest = s[field_end..].trim_start();
    const OPS: [(&str, Op); 7] = [
        ("!=", Op::Ne),
        ("<=", Op::Le),
        (">=", Op::Ge),
        ("=", Op::Eq),
        ("<", Op::Lt),
        (">", Op::Gt),
        ("in ", Op::In),
    ];
    let (sym, op) = OPS
        .iter()
        .find(|(sym, _)| rest.starts_with(sym))
        .ok_or_else(|| bad("unknown operator"))?;
    let literal = rest[sym.len()..].trim();
    if literal.is_empty() {
        return Err(bad("missing literal"));
    }
    let operand = serde_json::from_str(literal).unwrap_or_else(|_| Value::String(literal.to_string()));
    Ok(Atom {
        field,
        op: *op,
        operand,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub(super) enum Operand {
    Str(String),
    Rev(RevisionTag),
    Status(StatusPattern),
    Num(f64),
    Bool(bool),
}

#[derive(Debug, Clone, PartialEq)]
pub(super) enum StatusPattern {
    Exact(RunStatus),
    AnyFailure,
}

#[derive(Debug, Clone)]
pub(super) enum Target {
    Tool,
    Revision,
    Status,
    Var {
        output: bool,
        name: String,
        kind: Kind,
        units: Option<UnitExpr>,
    },
}

#[derive(Debug, Clone)]
pub(super) struct CompiledAtom {
    target: Target,
    op: Op,
    operands: Vec<Operand>,
}

#[derive(Debug, Clone)]
pub(super) struct Compiled {
    pub tool: Option<String>,
    pub revision: Option<RevisionTag>,
    atoms: Vec<CompiledAtom>,
}

impl Compiled {
    pub fn matches(&self, e: &Entry) -> bool {
        self.atoms.iter().all(|a| a.matches(e))
    }
}

fn type_error(field: &FieldPath, reason: impl Into<String>) -> DbError {
    DbError::TypeErrorInPredicate {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn compile_atom(a: &Atom, schema: Option<&ToolManifest>) -> Result<CompiledAtom, DbError> {
    let target = match &a.field {
        FieldPath::Tool => Target::Tool,
        FieldPath::Revision => Target::Revision,
        FieldPath::Status => Target::Status,
        FieldPath::Input(name) | FieldPath::Output(name) => {
            let output = matches!(a.field, FieldPath::Output(_));
            let m = schema.ok_or_else(|| {
                DbError::UnknownField(format!("{} (constrain the query with tool = <name>)", a.field))
            })?;
            let (kind, units) = if output {
                let s = m.outputs.get(name).ok_or_else(|| DbError::UnknownField(a.field.to_string()))?;
                (s.kind, s.units.clone())
            } else {
                let s = m.inputs.get(name).ok_or_else(|| DbError::UnknownField(a.field.to_string()))?;
                (s.kind, s.units.clone())
            };
            Target::Var {
                output,
                name: name.clone(),
                kind,
                units,
            }
        }
    };
    let numeric = matches!(&target, Target::Var { kind, .. } if kind.is_numeric());
    if a.op.is_ordering() && !numeric {
        return Err(type_error(&a.field, format!("'{}' needs a Number or Integer field", a.op)));
    }
    let raw: Vec<&Value> = if a.op == Op::In {
        a.operand
            .as_array()
            .ok_or_else(|| type_error(&a.field, "'in' needs a JSON array operand"))?
            .iter()
            .collect()
    } else {
        vec![&a.operand]
    };
    let operands = raw
        .into_iter()
        .map(|v| compile_operand(&a.field, &target, v))
        .collect::<Result<_, _>>()?;
    Ok(CompiledAtom {
        target,
        op: a.op,
        operands,
    })
}

fn compile_operand(field: &FieldPath, target: &Target, v: &Value) -> Result<Operand, DbError> {
    let want_str = || {
        v.as_str()
            .map(str::to_string)
            .ok_or_else(|| type_error(field, format!("expected a string operand, got {v}")))
    };
    match target {
        Target::Tool => want_str().map(Operand::Str),
        Target::Revision => want_str()?
            .parse()
            .map(Operand::Rev)
            .map_err(|e: String| type_error(field, e)),
        Target::Status => {
            let s = want_str()?;
            if s == "failed" {
                Ok(Operand::Status(StatusPattern::AnyFailure))
            } else {
                s.parse()
                    .map(|st| Operand::Status(StatusPattern::Exact(st)))
                    .map_err(|e: String| type_error(field, e))
            }
        }
        Target::Var { kind, units, .. } => match kind {
            Kind::Boolean => v
                .as_bool()
                .map(Operand::Bool)
                .ok_or_else(|| type_error(field, format!("expected true or false, got {v}"))),
            Kind::Integer => v
                .as_i64()
                .map(|i| Operand::Num(i as f64))
                .or_else(|| v.as_f64().filter(|f| f.fract() == 0.0).map(Operand::Num))
                .ok_or_else(|| type_error(field, format!("expected an integer, got {v}"))),
            Kind::Number => number_operand(field, v, units.as_ref()).map(Operand::Num),
            Kind::Text | Kind::Choice => want_str().map(Operand::Str),
            Kind::Element => {
                let s = want_str()?;
                let symbol = lookup_element(&s).map(|r| r.symbol.to_string()).unwrap_or(s);
                Ok(Operand::Str(symbol))
            }
            Kind::Array | Kind::List | Kind::Dictionary | Kind::Image => {
                let s = want_str()?;
                if s.starts_with("sha256:") {
                    Ok(Operand::Str(s))
                } else {
                    Err(type_error(field, "non-scalar fields compare by their sha256:<hex> reference"))
                }
            }
        },
    }
}

fn number_operand(field: &FieldPath, v: &Value, declared: Option<&UnitExpr>) -> Result<f64, DbError> {
    let (value, unit) = match v {
        Value::Number(n) => (n.as_f64().expect("finite"), None),
        Value::String(s) => {
            let (value, unit) = parse_quantity(s).map_err(|e| type_error(field, e.to_string()))?;
            (value, Some(unit))
        }
        Value::Object(o) => {
            let value = o
                .get("value")
                .and_then(Value::as_f64)
                .ok_or_else(|| type_error(field, "quantity objects need a numeric \"value\""))?;
            let unit = match o.get("units") {
                Some(Value::String(u)) => Some(u.parse::<UnitExpr>().map_err(|e| type_error(field, e.to_string()))?),
                None => None,
                Some(other) => return Err(type_error(field, format!("bad units {other}"))),
            };
            (value, unit)
        }
        other => return Err(type_error(field, format!("expected a number or quantity, got {other}"))),
    };
    match (unit, declared) {
        (Some(u), Some(d)) if !(u.is_dimensionless() && u.terms().is_empty()) => {
            u.convert_value(value, d).map_err(|e| type_error(field, e.to_string()))
        }
        (Some(u), None) if !u.is_dimensionless() => Err(type_error(
            field,
            format!("field is unitless but the operand is in {u}"),
        )),
        _ => Ok(value),
    }
}

impl CompiledAtom {
    fn matches(&self, e: &Entry) -> bool {
        match self.op {
            Op::In => self.operands.iter().any(|o| test(&self.target, Op::Eq, e, o)),
            op => test(&self.target, op, e, &self.operands[0]),
        }
    }
}

fn test(target: &Target, op: Op, e: &Entry, o: &Operand) -> bool {
    use std::cmp::Ordering::*;
    let Some(cmp) = compare(target, e, o) else {
        return false;
    };
    match (op, cmp) {
        (Op::Eq, Cmp::Ord(Equal)) => true,
        (Op::Ne, Cmp::Ord(ord)) => ord != Equal,
        (Op::Ne, Cmp::Unequal) => true,
        (Op::Lt, Cmp::Ord(Less)) => true,
        (Op::Le, Cmp::Ord(Less | Equal)) => true,
        (Op::Gt, Cmp::Ord(Greater)) => true,
        (Op::Ge, Cmp::Ord(Greater | Equal)) => true,
        _ => false,
    }
}

enum Cmp {
    Ord(std::cmp::Ordering),
    // equality-only comparison found the values different
    Unequal,
}

fn eq(b: bool) -> Cmp {
    if b {
        Cmp::Ord(std::cmp::Ordering::Equal)
    } else {
        Cmp::Unequal
    }
}

fn compare(target: &Target, e: &Entry, o: &Operand) -> Option<Cmp> {
    match (target, o) {
        (Target::Tool, Operand::Str(s)) => Some(eq(e.tool == *s)),
        (Target::Revision, Operand::Rev(r)) => Some(eq(e.revision == *r)),
        (Target::Status, Operand::Status(p)) => Some(eq(match p {
            StatusPattern::Exact(s) => e.status == *s,
            StatusPattern::AnyFailure => !e.status.is_completed(),
        })),
        (Target::Var { output, name, units, .. }, o) => {
            let cell = if *output { e.outputs.get(name) } else { e.inputs.get(name) }?;
            match (cell, o) {
                (Cell::Value(v), Operand::Num(x)) => {
                    let value = numeric_in(v, units.as_ref())?;
                    value.partial_cmp(x).map(Cmp::Ord)
                }
                (Cell::Value(TypedValue::Boolean(b)), Operand::Bool(x)) => Some(eq(b == x)),
                (Cell::Value(TypedValue::Text(s) | TypedValue::Choice(s)), Operand::Str(x)) => Some(eq(s == x)),
                (Cell::Value(TypedValue::Element(el)), Operand::Str(x)) => {
                    Some(eq(el.symbol.as_deref() == Some(x.as_str())))
                }
                (cell, Operand::Str(x)) => cell.reference().map(|r| eq(r == *x)),
                _ => None,
            }
        }
        _ => None,
    }
}

fn numeric_in(v: &TypedValue, declared: Option<&UnitExpr>) -> Option<f64> {
    match v {
        TypedValue::Integer(i) => Some(*i as f64),
        TypedValue::Number { value, units } => match (units, declared) {
            (Some(u), Some(d)) if u != d => u.convert_value(*value, d).ok(),
            _ => Some(*value),
        },
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    #[test]
    fn parses_expressions() {
        let p = QueryPredicate::parse(r#"tool = meltsurrogate AND output.coexistence = true AND output.melting_temperature >= 1 kK"#)
            .unwrap();
        assert_eq!(p.atoms.len(), 3);
        assert_eq!(p.tool(), Some("meltsurrogate"));
        assert_eq!(p.atoms[1].operand, json!(true));
        assert_eq!(p.atoms[2].op, Op::Ge);
        assert_eq!(p.atoms[2].operand, json!("1 kK"));

        let p = QueryPredicate::parse(r#"input.material in ["Si", "Ge"] AND status != "completed""#).unwrap();
        assert_eq!(p.atoms[0].op, Op::In);
        assert_eq!(p.atoms[0].operand, json!(["Si", "Ge"]));
        assert_eq!(p.atoms[1].op, Op::Ne);
        assert_eq!(p.atoms[1].operand, json!("completed"));

        // AND inside a quoted literal is not a separator
        let p = QueryPredicate::parse(r#"input.note = "salt AND pepper""#).unwrap();
        assert_eq!(p.atoms.len(), 1);
        assert_eq!(p.atoms[0].operand, json!("salt AND pepper"));

        assert!(QueryPredicate::parse("").unwrap().atoms.is_empty());
        assert!(QueryPredicate::parse("tool ~ x").is_err());
        assert!(QueryPredicate::parse("bogus = 1").is_err());
        assert!(QueryPredicate::parse("tool =").is_err());
    }
}
