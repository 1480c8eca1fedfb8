//! Config loading: defaults, then the TOML file, then `--set` overrides.

use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use gto_core::lab::ExperimentConfig;
use toml::{Table, Value};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn cerr(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub fn defaults_toml() -> Result<String> {
    to_toml(&ExperimentConfig::default())
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    Ok(toml::to_string_pretty(cfg)?)
}

fn default_table() -> Result<Table> {
    match Value::try_from(ExperimentConfig::default())? {
        Value::Table(t) => Ok(t),
        _ => unreachable!("config serializes to a table"),
    }
}

/// Recursively overlays `src` onto `dst`; tables merge, everything else replaces.
fn merge(dst: &mut Table, src: Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

fn parse_value(text: &str) -> Value {
    // Anything that is not a TOML literal is taken as a bare string.
    match format!("v = {text}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.into())),
        Err(_) => Value::String(text.into()),
    }
}

fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| cerr(format!("override {assignment:?} is not KEY=VALUE")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(cerr(format!("bad key {key:?}")));
    }
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        cur = match cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => return Err(cerr(format!("{key}: {part} is not a table"))),
        };
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = default_table()?;
    if let Some(path) = path {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: Table = text.parse().map_err(|e| cerr(format!("{}: {e}", path.display())))?;
        merge(&mut table, file);
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig = Value::Table(table).try_into().map_err(|e| cerr(format!("config: {e}")))?;
    cfg.validate().map_err(|e| cerr(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = defaults_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, ExperimentConfig::default());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let sets = vec!["gto.omega=0.0".to_string(), "eval.temperatures=[0.0]".into(), "seed=7".into()];
        let cfg = load(None, &sets).unwrap();
        assert_eq!(cfg.gto.omega, 0.0);
        assert_eq!(cfg.eval.temperatures.len(), 1);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.policy, ExperimentConfig::default().policy);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for bad in ["gto.clip_eps=0.0", "nope=1", "policy.depth", "reward.aggregator=\"median\""] {
            let e = load(None, &[bad.to_string()]).unwrap_err();
            assert!(e.downcast_ref::<ConfigError>().is_some(), "{bad}: {e}");
        }
    }

    #[test]
    fn file_values_merge_over_defaults() {
        let dir = std::env::temp_dir().join(format!("gtolab-cfg-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("c.toml");
        fs::write(&p, "[policy]\ndepth = 3\n").unwrap();
        let cfg = load(Some(&p), &[]).unwrap();
        assert_eq!(cfg.policy.depth, 3);
        assert_eq!(cfg.policy.layer_topk, ExperimentConfig::default().policy.layer_topk);
        fs::remove_dir_all(dir).unwrap();
    }
}
