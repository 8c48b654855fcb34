//! Canonical JSON serialization.
//!
//! Rules (a compatibility contract: changing any of them changes every key):
//!
//! 1. Object keys are sorted lexicographically by their UTF-8 bytes, after
//!    NFC normalization.
//! 2. No insignificant whitespace.
//! 3. Integers print as plain decimal digits. Floats that hold an integer
//!    with magnitude below 2^53 print the same way (`5.0` becomes `5`);
//!    other floats print in shortest round-trip form (`0.1`, `5e-10`,
//!    `1e16` style as produced by the Ryū algorithm). `-0.0` prints as `0`.
//! 4. Strings are NFC-normalized and escaped as JSON requires.

use serde_json::{Number, Value};
use unicode_normalization::UnicodeNormalization;

const EXACT_INT_LIMIT: f64 = 9_007_199_254_740_992.0; // 2^53

pub fn canonical_json(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    write_value(value, &mut out);
    out
}

/// Canonical decimal text for a JSON number.
pub fn canonical_number(n: &Number) -> String {
    if let Some(i) = n.as_i64() {
        return i.to_string();
    }
    if let Some(u) = n.as_u64() {
        return u.to_string();
    }
    let f = n.as_f64().expect("JSON numbers are finite");
    canonical_f64(f)
}

pub fn canonical_f64(f: f64) -> String {
    if f == 0.0 {
        return "0".to_string();
    }
    if f.fract() == 0.0 && f.abs() < EXACT_INT_LIMIT {
        return (f as i64).to_string();
    }
    let mut buf = ryu::Buffer::new();
    buf.format_finite(f).to_string()
}

fn write_string(s: &str, out: &mut Vec<u8>) {
    let normalized: String = s.nfc().collect();
    serde_json::to_writer(&mut *out, &normalized).expect("writing to a Vec cannot fail");
}

fn write_value(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(b) => out.extend_from_slice(if *b { b"true" } else { b"false" }),
        Value::Number(n) => out.extend_from_slice(canonical_number(n).as_bytes()),
        Value::String(s) => write_string(s, out),
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value(item, out);
            }
            out.push(b']');
        }
        Value::Object(map) => {
            let mut entries: Vec<(String, &Value)> =
                map.iter().map(|(k, v)| (k.nfc().collect(), v)).collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push(b'{');
            for (i, (k, v)) in entries.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_string(k, out);
                out.push(b':');
                write_value(v, out);
            }
            out.push(b'}');
        }
    }
}
