//! JSON configuration files with dotted `key.path=value` overrides.
//! Unknown keys are rejected by the target type during deserialization.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, IoContext, Result};

/// Parse an override value: JSON when it parses (numbers, booleans, null,
/// arrays, quoted strings), otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Apply one `a.b.c=value` override in place.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} has an empty component")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override {key:?}: {} is not a section", parts[..i].join(".")))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parse_value(raw));
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one component")
}

/// Recursively overlay `top` onto `base`; objects merge, everything else
/// replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults, overlaid with the file at `path`, then with the overrides.
/// Nested sections may be given partially.
pub fn load<T: DeserializeOwned + Serialize + Default>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut root = serde_json::to_value(T::default()).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).with_path(p)?;
        let file: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        if !file.is_object() {
            return Err(Error::Config(format!("{}: top level must be a JSON object", p.display())));
        }
        merge(&mut root, file);
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))
}

/// Pretty JSON snapshot of an effective configuration.
pub fn snapshot<T: Serialize>(config: &T) -> Result<String> {
    serde_json::to_string_pretty(config)
        .map(|s| s + "\n")
        .map_err(|e| Error::Config(e.to_string()))
}
