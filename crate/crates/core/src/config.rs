//! Run configuration files and `section.key=value` overrides.
//!
//! A config file is TOML with the sections `[model]`, `[model.encoder]`,
//! `[model.loss]`, `[train]`, `[augment]` and `[eval]`. Every key is
//! optional; missing keys keep their defaults. Unknown keys, in the file or
//! in an override, are configuration errors.

use std::fs;
use std::path::Path;

use toml::{Table, Value};

use crate::data::SynthSpec;
use crate::error::{DemoError, Result};
use crate::trainer::RunConfig;

fn defaults_table() -> Table {
    Table::try_from(RunConfig::default()).expect("defaults serialize")
}

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Apply one `a.b.c=value` override to a config table. The key must exist
/// in the default configuration.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    override_checked(table, &defaults_table(), spec)
}

/// Like [`apply_override`] with an explicit table of known keys.
pub fn override_checked(table: &mut Table, defaults: &Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| DemoError::Config(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let path: Vec<&str> = key.split('.').collect();
    let mut known = defaults;
    for (i, part) in path.iter().enumerate() {
        match known.get(*part) {
            Some(Value::Table(t)) if i + 1 < path.len() => known = t,
            Some(v) if i + 1 == path.len() && !v.is_table() => {}
            _ => return Err(DemoError::Config(format!("unknown config key {key:?}"))),
        }
    }
    let mut node = table;
    for part in &path[..path.len() - 1] {
        node = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| DemoError::Config(format!("{part} is not a section")))?;
    }
    node.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn finish(table: Table) -> Result<RunConfig> {
    let cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| DemoError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parse config text, then apply overrides in order.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table: Table = toml::from_str(text).map_err(|e| DemoError::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    finish(table)
}

/// Load a config file (or defaults when `path` is `None`) with overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| DemoError::io(p, e))?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

/// Parse a synthetic-data spec (flat `key = value` lines) with overrides.
pub fn parse_synth_spec(text: &str, overrides: &[String]) -> Result<SynthSpec> {
    let mut table: Table = toml::from_str(text).map_err(|e| DemoError::Config(format!("synthetic spec: {e}")))?;
    let defaults = Table::try_from(SynthSpec::default()).expect("defaults serialize");
    for o in overrides {
        override_checked(&mut table, &defaults, o)?;
    }
    let spec: SynthSpec = table
        .try_into()
        .map_err(|e: toml::de::Error| DemoError::Config(format!("synthetic spec: {e}")))?;
    spec.validate()?;
    Ok(spec)
}

pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}
