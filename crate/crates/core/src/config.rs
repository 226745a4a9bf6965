//! Run configuration: one TOML file with `[data]`, `[model]`, `[train]`,
//! `[loss]`, `[eval]` and `[run]` sections. Every key is optional and falls
//! back to its default; `section.key=value` overrides are applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GrammarConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::training::{LossConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `vocab.json` and one subdirectory per split.
    pub dir: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub grammar: GrammarConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: "data".into(),
            train: 200,
            val: 50,
            test: 100,
            seed: 0,
            grammar: GrammarConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Directory for the checkpoint, loss log and reports.
    pub out_dir: String,
    /// Validation interval in steps; 0 disables.
    pub eval_every: u64,
    /// Checkpoint interval in steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out_dir: "run".into(),
            eval_every: 500,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub run: RunSection,
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like section.key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key.trim(), "empty key segment"));
    }
    let mut cur = table;
    for seg in &path[..path.len() - 1] {
        let entry = cur
            .entry((*seg).to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key.trim(), format!("`{seg}` is not a section")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides, and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::Format {
                    path: p.into(),
                    msg: e.to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.grammar.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.eval.validate()?;
        if self.data.grammar.canvas != self.model.image_size {
            return Err(Error::config(
                "model.image_size",
                format!("must equal data.grammar.canvas ({})", self.data.grammar.canvas),
            ));
        }
        if self.data.train == 0 {
            return Err(Error::config("data.train", "must be positive"));
        }
        Ok(())
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn split_dir(&self, split: &str) -> PathBuf {
        Path::new(&self.data.dir).join(split)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.run.out_dir)
    }
}
