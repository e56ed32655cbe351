//! Layered configuration: JSON file, then `--set` pairs, then typed flags.

use std::path::Path;

use botaclip::io::RunConfig;
use botaclip::{Error, Result};
use serde_json::{Map, Value};

/// Parses `a.b.c=value`. The value is read as JSON when it parses as JSON,
/// otherwise it is taken as a string.
pub fn parse_assignment(text: &str) -> std::result::Result<(String, Value), String> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got {text:?}"))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(format!("bad key {key:?}"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((key.to_owned(), value))
}

/// Writes `value` at a dotted path, creating intermediate objects.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part:?} is inside a non-object value")))?;
        if parts.peek().is_none() {
            obj.insert(part.to_owned(), value);
            return Ok(());
        }
        node = obj.entry(part.to_owned()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("keys are non-empty")
}

/// Builds the run configuration. Later layers win; unknown keys anywhere
/// are rejected by the strict schema.
pub fn build_config(file: Option<&Path>, sets: &[(String, Value)], seed: Option<u64>) -> Result<RunConfig> {
    let mut root = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !root.is_object() {
        return Err(Error::Config("configuration must be a JSON object".into()));
    }
    for (k, v) in sets {
        set_path(&mut root, k, v.clone())?;
    }
    if let Some(s) = seed {
        set_path(&mut root, "seed", Value::from(s))?;
    }
    serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))
}
