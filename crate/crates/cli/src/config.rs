//! Config file loading and layering: preset, then file, then flags.
//!
//! The file is TOML. Top-level keys are `preset`, `seed`, `precision`,
//! `workers` and one table per
//! concern (`experiment`, `cleaning`, `split`, `tokenizer`, `synth`,
//! `decode`). See `docs/config.md`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::commands::CliError;

const SECTIONS: [&str; 6] = [
    "experiment",
    "cleaning",
    "split",
    "tokenizer",
    "synth",
    "decode",
];

/// Parsed config file; every section is a JSON object (possibly empty).
#[derive(Clone, Debug, Default)]
pub struct FileConfig {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub precision: Option<u32>,
    pub workers: Option<usize>,
    sections: Map<String, Value>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage("io", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: Value = toml::from_str(text)
            .map_err(|e| CliError::usage("config", one_line(&e.to_string())))?;
        let Value::Object(mut top) = value else {
            return Err(CliError::usage("config", "config file must be a table"));
        };
        let preset = match top.remove("preset") {
            None => None,
            Some(Value::String(s)) => Some(s),
            Some(_) => return Err(CliError::usage("config", "`preset` must be a string")),
        };
        let mut uint = |key: &str| -> Result<Option<u64>, CliError> {
            match top.remove(key) {
                None => Ok(None),
                Some(v) => v.as_u64().map(Some).ok_or_else(|| {
                    CliError::usage("config", format!("`{key}` must be a non-negative integer"))
                }),
            }
        };
        let seed = uint("seed")?;
        let precision = uint("precision")?.map(|p| p as u32);
        let workers = uint("workers")?.map(|w| w as usize);
        for (k, v) in &top {
            if !SECTIONS.contains(&k.as_str()) {
                return Err(CliError::usage("config", format!("unknown key `{k}`")));
            }
            if !v.is_object() {
                return Err(CliError::usage("config", format!("`{k}` must be a table")));
            }
        }
        Ok(FileConfig {
            preset,
            seed,
            precision,
            workers,
            sections: top,
        })
    }

    pub fn section(&self, name: &str) -> Value {
        self.sections
            .get(name)
            .cloned()
            .unwrap_or_else(|| Value::Object(Map::new()))
    }
}

/// Recursive object merge; `over` wins, non-objects replace wholesale.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Every key of `partial` must exist in `full` (the serialized defaults).
fn check_keys(partial: &Value, full: &Value, path: &str) -> Result<(), CliError> {
    if let (Value::Object(p), Value::Object(f)) = (partial, full) {
        for (k, v) in p {
            let here = if path.is_empty() {
                k.clone()
            } else {
                format!("{path}.{k}")
            };
            match f.get(k) {
                None => return Err(CliError::usage("config", format!("unknown key `{here}`"))),
                Some(fv) => check_keys(v, fv, &here)?,
            }
        }
    }
    Ok(())
}

/// Layers `file` then `flags` over `base` and deserializes the result.
/// Unknown keys and type errors are usage errors naming `section`.
pub fn layer<T: Serialize + DeserializeOwned>(
    base: &T,
    file: Value,
    flags: Value,
    section: &str,
) -> Result<T, CliError> {
    let full = serde_json::to_value(base).map_err(|e| CliError::runtime("json", e.to_string()))?;
    check_keys(&file, &full, section)?;
    let mut v = full;
    merge(&mut v, file);
    merge(&mut v, flags);
    serde_json::from_value(v).map_err(|e| CliError::usage("config", format!("[{section}] {e}")))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
