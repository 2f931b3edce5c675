//! Config loading and `--set` overrides.

use std::path::Path;

use regulus_core::simulation::ScenarioConfig;
use serde::Serialize;
use serde_json::Value;

use crate::{usage, CliResult};

/// Apply `key.path=value` to `doc`. Every path segment must already exist;
/// the value is parsed as JSON and falls back to a plain string.
pub fn apply_override(doc: &mut Value, spec: &str) -> CliResult {
    let (key, raw) = spec.split_once('=').ok_or_else(|| usage(format!("override {spec:?} is not KEY=VALUE")))?;
    let mut slot = &mut *doc;
    for seg in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(seg))
            .ok_or_else(|| usage(format!("unknown config key {key:?}")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Defaults, then `base` (a config already on disk elsewhere) or the file at
/// `path`, then the overrides in order.
pub fn load(path: Option<&Path>, base: Option<Value>, overrides: &[String], seed: Option<u64>) -> CliResult<ScenarioConfig> {
    let cfg: ScenarioConfig = match (path, base) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        (None, Some(v)) => serde_json::from_value(v).map_err(|e| usage(format!("stored config: {e}")))?,
        (None, None) => ScenarioConfig::default(),
    };
    let mut doc = serde_json::to_value(&cfg).expect("config serializes");
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    if let Some(s) = seed {
        doc["seed"] = Value::from(s);
    }
    serde_json::from_value(doc).map_err(|e| usage(format!("config after overrides: {e}")))
}

pub fn print_json(v: &impl Serialize) -> CliResult {
    println!("{}", serde_json::to_string(v).expect("serializable"));
    Ok(())
}
