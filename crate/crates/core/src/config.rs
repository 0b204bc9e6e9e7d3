//! TOML run configs, dotted-key overrides and sweep files.
//!
//! A sweep file holds an optional `[defaults]` table and an array of `[[run]]`
//! tables; each run is the defaults deep-merged with its own table.

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::training::RunConfig;

/// Top-level keys that are omitted from a serialized config when unset.
const OPTIONAL_KEYS: [&str; 4] = ["out_dim", "head", "model", "bandwidth"];

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(config_err)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_table(cfg: &RunConfig) -> Result<Table> {
    match Value::try_from(cfg).map_err(config_err)? {
        Value::Table(t) => Ok(t),
        _ => Err(Error::Config("config did not serialize to a table".into())),
    }
}

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `key.path=value` overrides. Values are parsed as TOML, falling back
/// to a bare string. Every key must name an existing config field.
pub fn apply_overrides(cfg: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    let mut table = to_table(cfg)?;
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {ov:?} is not of the form key=value")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        let (last, parents) = path.split_last().expect("split yields one item");
        let mut node = &mut table;
        for (depth, seg) in parents.iter().enumerate() {
            node = match node.get_mut(*seg) {
                Some(Value::Table(t)) => t,
                _ => {
                    return Err(Error::Config(format!(
                        "override {key:?}: {:?} is not a config table",
                        path[..=depth].join(".")
                    )))
                }
            };
        }
        let known = node.contains_key(*last) || (parents.is_empty() && OPTIONAL_KEYS.contains(last));
        if !known {
            return Err(Error::Config(format!("override {key:?}: unknown config key")));
        }
        node.insert(last.to_string(), parse_value(raw));
    }
    let text = toml::to_string(&table).map_err(config_err)?;
    parse_run_config(&text).map_err(|e| Error::Config(format!("after overrides: {e}")))
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

pub fn parse_sweep(text: &str) -> Result<Vec<RunConfig>> {
    let root: Table = toml::from_str(text).map_err(config_err)?;
    for key in root.keys() {
        if key != "defaults" && key != "run" {
            return Err(Error::Config(format!("unknown sweep key {key:?}")));
        }
    }
    let defaults = match root.get("defaults") {
        Some(Value::Table(t)) => t.clone(),
        Some(_) => return Err(Error::Config("`defaults` must be a table".into())),
        None => Table::new(),
    };
    let runs = match root.get("run") {
        Some(Value::Array(a)) => a,
        _ => return Err(Error::Config("sweep file needs a [[run]] array".into())),
    };
    runs.iter()
        .enumerate()
        .map(|(i, run)| {
            let Value::Table(t) = run else {
                return Err(Error::Config(format!("run {i} is not a table")));
            };
            let mut merged = defaults.clone();
            merge(&mut merged, t);
            let text = toml::to_string(&merged).map_err(config_err)?;
            parse_run_config(&text).map_err(|e| Error::Config(format!("run {i}: {e}")))
        })
        .collect()
}
