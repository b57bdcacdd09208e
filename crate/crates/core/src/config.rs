//! Declarative run configuration.
//!
//! A run reads one TOML file whose tables mirror the library config types
//! (`[synth]`, `[graphs]`, `[train]` with nested `encoder`, `augmentation`,
//! `hfmca` and `baseline`, and `[probe]`). Command-line overrides use dotted
//! keys, e.g. `train.encoder.hidden_dim=32`; the right-hand side is parsed
//! as a TOML value and falls back to a plain string.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::connectome::EdgeSelection;
use crate::error::{Error, Result};
use crate::evalharness::ProbeConfig;
use crate::synthgen::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Edges kept per graph; absent means `n^2 / 400`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_budget: Option<usize>,
    pub selection: EdgeSelection,
}

/// Command and arguments that produced a resolved config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Invocation {
    pub command: String,
    pub arguments: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub synth: SynthConfig,
    pub graphs: GraphConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    /// Recorded in resolved copies; ignored on input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invocation: Option<Invocation>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            synth: SynthConfig::default(),
            graphs: GraphConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            invocation: None,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides and validates the result.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        cfg.invocation = None;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Writes the fully resolved config, with its invocation, to
    /// `dir/config.resolved.toml`.
    pub fn write_resolved(&self, dir: &Path, invocation: Invocation) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut cfg = self.clone();
        cfg.invocation = Some(invocation);
        let path = dir.join("config.resolved.toml");
        fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Objective;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_are_typed() {
        let cfg = RunConfig::from_toml_str(
            "[train]\nepochs = 3\n",
            &[
                "train.encoder.hidden_dim=32".into(),
                "train.objective=vicreg".into(),
                "probe.probe_lr_grid=[0.1, 0.01]".into(),
                "graphs.selection=absolute".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.encoder.hidden_dim, 32);
        assert_eq!(cfg.train.objective, Objective::Vicreg);
        assert_eq!(cfg.probe.probe_lr_grid, vec![0.1, 0.01]);
        assert_eq!(cfg.graphs.selection, EdgeSelection::Absolute);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("[train]\nepochz = 3\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("", &["train.batch_size=1".into()]).is_err());
        assert!(RunConfig::from_toml_str("", &["nokey".into()]).is_err());
    }

    #[test]
    fn resolved_copy_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::from_toml_str("", &["graphs.edge_budget=50".into(), "train.seed=9".into()]).unwrap();
        cfg.write_resolved(dir.path(), Invocation { command: "pretrain".into(), ..Default::default() }).unwrap();
        let back = RunConfig::load(Some(&dir.path().join("config.resolved.toml")), &[]).unwrap();
        assert_eq!(back, cfg);
    }
}
