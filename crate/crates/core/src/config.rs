//! Training configuration: a TOML document with `[trainer]`, `[data]`,
//! `[loss]` and `[model]` tables, plus `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Layout;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::unet::SIZE_MULTIPLE;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Cosine decay from `learning_rate` to `min_learning_rate` over the run.
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Weighted sum of both stage losses.
    #[default]
    Full,
    /// Stage-1 loss only; the refinement network is not run.
    Stage1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip_norm: f64,
    /// Validate (and possibly save `best.ckpt`) every this many epochs;
    /// 0 disables validation.
    pub eval_every: u64,
    pub checkpoint_dir: PathBuf,
    /// Defaults to `train_log.jsonl` in the checkpoint directory.
    pub log_path: Option<PathBuf>,
    /// Stop after this many optimiser steps.
    pub max_steps: Option<u64>,
    pub objective: Objective,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            epochs: 100,
            batch_size: 8,
            learning_rate: 2e-4,
            min_learning_rate: 1e-6,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
            grad_clip_norm: 1.0,
            eval_every: 1,
            checkpoint_dir: PathBuf::from("checkpoints"),
            log_path: None,
            max_steps: None,
            objective: Objective::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub layout: Layout,
    pub height: usize,
    pub width: usize,
    /// Random horizontal flips of training pairs.
    pub hflip: bool,
    pub replicate_grayscale: bool,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            layout: Layout::Auto,
            height: 128,
            width: 128,
            hflip: false,
            replicate_grayscale: false,
            train_limit: None,
            test_limit: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub trainer: TrainerConfig,
    pub data: DataConfig,
    pub loss: LossWeights,
    pub model: ModelConfig,
}

/// Parse `value` as a TOML value, falling back to a bare string so that
/// paths and enum names need no quoting.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.into())),
        Err(_) => toml::Value::String(value.into()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed key"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn from_table(table: toml::Table, key: &str) -> Result<Config> {
    Config::deserialize(table).map_err(|e| Error::config(key, e.message().to_string()))
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parse `text`, then apply `key=value` overrides in order, then validate.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        let mut config = from_table(table.clone(), "config")?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.as_str(), "override must look like section.key=value"))?;
            let key = key.trim();
            set_dotted(&mut table, key, parse_value(value.trim()))?;
            config = from_table(table.clone(), key)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    /// Schema checks that need no file system access.
    pub fn validate(&self) -> Result<()> {
        let t = &self.trainer;
        if t.epochs == 0 {
            return Err(Error::config("trainer.epochs", "must be at least 1"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("trainer.batch_size", "must be at least 1"));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::config("trainer.learning_rate", "must be positive"));
        }
        if !(t.min_learning_rate >= 0.0 && t.min_learning_rate <= t.learning_rate) {
            return Err(Error::config(
                "trainer.min_learning_rate",
                "must be between 0 and trainer.learning_rate",
            ));
        }
        if !(t.grad_clip_norm >= 0.0 && t.grad_clip_norm.is_finite()) {
            return Err(Error::config("trainer.grad_clip_norm", "must be finite and nonnegative"));
        }
        if t.max_steps == Some(0) {
            return Err(Error::config("trainer.max_steps", "must be at least 1"));
        }
        let d = &self.data;
        for (key, v) in [("data.height", d.height), ("data.width", d.width)] {
            if v == 0 || v % SIZE_MULTIPLE != 0 {
                return Err(Error::config(key, format!("must be a positive multiple of {SIZE_MULTIPLE}, got {v}")));
            }
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// The dataset root, which must exist.
    pub fn data_root(&self) -> Result<&Path> {
        let root = self
            .data
            .root
            .as_deref()
            .ok_or_else(|| Error::config("data.root", "no dataset root given"))?;
        if !root.is_dir() {
            return Err(Error::config("data.root", format!("{} is not a directory", root.display())));
        }
        Ok(root)
    }

    pub fn log_path(&self) -> PathBuf {
        self.trainer
            .log_path
            .clone()
            .unwrap_or_else(|| self.trainer.checkpoint_dir.join("train_log.jsonl"))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("plain data serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        assert_eq!(Config::from_toml_str(&c.to_toml_string()).unwrap(), c);
        assert_eq!(Config::from_toml_str("").unwrap(), c);
    }

    #[test]
    fn overrides() {
        let o = |s: &[&str]| s.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let c = Config::from_toml_with_overrides(
            "[trainer]\nepochs = 3\n",
            &o(&["trainer.epochs=1", "data.root=/tmp/x", "data.layout=lolv1", "loss.alpha=1"]),
        )
        .unwrap();
        assert_eq!(c.trainer.epochs, 1);
        assert_eq!(c.data.root.as_deref(), Some(Path::new("/tmp/x")));
        assert_eq!(c.data.layout, Layout::Lolv1);
        assert_eq!(c.loss.alpha, 1.0);

        let err = Config::from_toml_with_overrides("", &o(&["trainer.epoch=1"])).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "trainer.epoch"), "{err}");
        let err = Config::from_toml_with_overrides("", &o(&["trainer.epochs=0"])).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "trainer.epochs"), "{err}");
        let err = Config::from_toml_with_overrides("", &o(&["data.height=100"])).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "data.height"), "{err}");
    }

    #[test]
    fn missing_root_is_named() {
        let err = Config::default().data_root().unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "data.root"));
    }
}
