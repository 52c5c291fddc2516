//! Optional TOML overrides for module parameters and the per-run snapshot.
//!
//! An override file has one table per module, each holding any subset of that
//! module's fields:
//!
//! ```toml
//! [synth]
//! width = 64
//! noise_sigma = 2.0
//!
//! [tracker]
//! psr_threshold = 6.0
//!
//! [schedule]
//! learning_rate = 0.001
//! duration = { steps = 500 }
//!
//! [nms]
//! iou_thr = 0.4
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const SNAPSHOT_FILE: &str = "run_config.json";
const SECTIONS: [&str; 4] = ["synth", "tracker", "schedule", "nms"];

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    table: serde_json::Map<String, Value>,
}

impl Overrides {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        let parsed: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        let value = serde_json::to_value(parsed).map_err(|e| CliError::validation(e.to_string()))?;
        let Value::Object(table) = value else {
            unreachable!("a TOML document is a table")
        };
        if let Some(unknown) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(CliError::validation(format!(
                "unknown section [{unknown}] in {}; expected one of {SECTIONS:?}",
                path.display()
            )));
        }
        Ok(Self { table })
    }

    /// `base` with the fields of section `name` replaced (nested tables merge).
    pub fn apply<T: Serialize + DeserializeOwned>(&self, name: &str, base: T) -> Result<T, CliError> {
        let Some(patch) = self.table.get(name) else {
            return Ok(base);
        };
        let mut value = serde_json::to_value(&base).map_err(|e| CliError::runtime(e.to_string()))?;
        merge(&mut value, patch, name)?;
        serde_json::from_value(value).map_err(|e| CliError::validation(format!("[{name}]: {e}")))
    }
}

/// Merges `patch` into `base`. Top-level keys must already exist. A nested
/// table whose keys all exist is merged field by field; one that introduces
/// new keys (say, a different enum variant) replaces the old value outright.
fn merge(base: &mut Value, patch: &Value, section: &str) -> Result<(), CliError> {
    let (Value::Object(b), Value::Object(p)) = (base, patch) else {
        return Err(CliError::validation(format!("[{section}] must be a table")));
    };
    for (k, v) in p {
        let Some(slot) = b.get_mut(k) else {
            return Err(CliError::validation(format!("[{section}] has no field `{k}`")));
        };
        merge_value(slot, v);
    }
    Ok(())
}

fn merge_value(slot: &mut Value, v: &Value) {
    match (slot, v) {
        (Value::Object(b), Value::Object(p)) if p.keys().all(|k| b.contains_key(k)) => {
            for (k, pv) in p {
                merge_value(b.get_mut(k).expect("key checked"), pv);
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// What was run and with which effective parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub tool_version: String,
    /// Parsed command-line arguments.
    pub args: Value,
    /// Effective module parameters after overrides.
    pub params: Value,
}

impl RunConfig {
    pub fn new(command: &str, seed: u64, args: &impl Serialize, params: Value) -> Self {
        Self {
            command: command.to_string(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            args: serde_json::to_value(args).unwrap_or(Value::Null),
            params,
        }
    }

    /// Writes `run_config.json` into `dir`, or `<file>.run_config.json` when
    /// the output is a single file.
    pub fn write_next_to(&self, output: &Path, output_is_dir: bool) -> Result<PathBuf, CliError> {
        let path = if output_is_dir {
            output.join(SNAPSHOT_FILE)
        } else {
            let name = output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            output.with_file_name(format!("{name}.{SNAPSHOT_FILE}"))
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CliError::runtime(format!("{}: {e}", parent.display())))?;
        }
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::runtime(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
