//! TOML configuration with dotted-key overrides.
//!
//! The file mirrors `TrainConfig`, plus an optional `[serve]` table for the
//! HTTP service. Overrides look like `loss.gamma=3` or `serve.port=9000` and
//! are applied after the file is parsed. Values are read as TOML literals and
//! fall back to plain strings, so `geometry=paper` works without quotes.

use std::path::Path;

use promptseg::training::TrainConfig;
use promptseg_service::ServiceConfig;
use toml::{Table, Value};

#[derive(Clone, Debug, Default)]
pub struct Config {
    pub train: TrainConfig,
    pub serve: ServiceConfig,
}

/// Problems with the config file or overrides; reported as usage errors.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError(format!("override key `{key}` is malformed")));
    }
    let (last, path) = parts.split_last().expect("nonempty key");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn from_table(mut table: Table) -> Result<Config, ConfigError> {
    let serve = match table.remove("serve") {
        Some(v) => v
            .try_into::<ServiceConfig>()
            .map_err(|e| ConfigError(format!("[serve]: {}", e.message())))?,
        None => ServiceConfig::default(),
    };
    let train = Value::Table(table)
        .try_into::<TrainConfig>()
        .map_err(|e| ConfigError(e.message().to_string()))?;
    Ok(Config { train, serve })
}

/// Reads `path` (or starts from defaults) and applies `overrides` in order.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config, ConfigError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| ConfigError(format!("{}: {}", p.display(), e.message())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    from_table(table)
}
