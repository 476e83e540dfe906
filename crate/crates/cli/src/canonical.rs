//! Fixed-precision JSON shared by the CLI and the HTTP API.

use serde::Serialize;
use serde_json::{Number, Value};

/// Significant digits kept for every floating-point number.
pub const SIGNIFICANT_DIGITS: usize = 10;

/// Rounds `x` to [`SIGNIFICANT_DIGITS`] significant digits.
pub fn round_significant(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x)
        .parse()
        .expect("formatted float parses")
}

fn canonicalize(value: Value) -> Value {
    match value {
        Value::Number(n) if n.is_f64() => {
            let x = round_significant(n.as_f64().expect("f64 number"));
            Number::from_f64(x)
                .map(Value::Number)
                .unwrap_or(Value::Null)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        Value::Object(map) => {
            Value::Object(map.into_iter().map(|(k, v)| (k, canonicalize(v))).collect())
        }
        other => other,
    }
}

pub fn to_canonical_value<T: Serialize>(value: &T) -> serde_json::Result<Value> {
    Ok(canonicalize(serde_json::to_value(value)?))
}

/// Compact canonical JSON text.
pub fn to_canonical_string<T: Serialize>(value: &T) -> serde_json::Result<String> {
    serde_json::to_string(&to_canonical_value(value)?)
}
