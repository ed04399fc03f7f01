//! Training configuration layering: preset, then config file, then flags.

use std::path::Path;

use anyhow::Context;
use serde_json::Value;

use polarfuse::training::TrainConfig;

use crate::InputError;

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Read a config file: a bare training config, or a run manifest whose
/// `config` field is one.
pub fn read_config_file(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| InputError(format!("config {} is not valid JSON: {e}", path.display())))?;
    let value = match value {
        Value::Object(mut m) if m.contains_key("command") && m.contains_key("config") => {
            m.remove("config").unwrap_or(Value::Null)
        }
        v => v,
    };
    if !value.is_object() {
        return Err(InputError(format!("config {} must be a JSON object", path.display())).into());
    }
    Ok(value)
}

/// `preset` overlaid with the file at `path`, if any. Unknown top-level keys
/// are rejected so typos do not silently fall back to defaults.
pub fn layered(preset: TrainConfig, path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    let Some(path) = path else { return Ok(preset) };
    let mut base = serde_json::to_value(&preset)?;
    let over = read_config_file(path)?;
    let known = base.as_object().map(|m| m.keys().cloned().collect::<Vec<_>>()).unwrap_or_default();
    if let Some(unknown) = over.as_object().and_then(|m| m.keys().find(|k| !known.contains(k))) {
        return Err(InputError(format!("config {}: unknown field `{unknown}`", path.display())).into());
    }
    merge(&mut base, over);
    serde_json::from_value(base).map_err(|e| InputError(format!("config {}: {e}", path.display())).into())
}
