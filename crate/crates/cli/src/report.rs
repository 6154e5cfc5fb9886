//! JSON reports: schema tag, six significant digits, stdout / stderr split.

use serde::Serialize;
use serde_json::{Map, Value};

pub const SCHEMA: u32 = 1;

pub fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

/// Rounds every non-integer number in place.
pub fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64() {
                if let Some(r) = serde_json::Number::from_f64(sig6(x)) {
                    *n = r;
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

/// A report under construction: `schema`, `command`, then fields in order.
pub struct Report {
    fields: Map<String, Value>,
}

impl Report {
    pub fn new(command: &str) -> Report {
        let mut fields = Map::new();
        fields.insert("schema".into(), SCHEMA.into());
        fields.insert("command".into(), command.into());
        Report { fields }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) -> &mut Report {
        let v = serde_json::to_value(value).expect("report values serialize");
        self.fields.insert(key.into(), v);
        self
    }

    /// Copies the fields of a struct that serializes to an object.
    pub fn extend(&mut self, value: impl Serialize) -> &mut Report {
        if let Value::Object(map) = serde_json::to_value(value).expect("report values serialize") {
            for (k, v) in map {
                self.fields.insert(k, v);
            }
        }
        self
    }

    pub fn into_value(self) -> Value {
        let mut v = Value::Object(self.fields);
        round_floats(&mut v);
        v
    }
}
