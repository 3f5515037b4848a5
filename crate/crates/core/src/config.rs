//! Run configuration files.
//!
//! A run is described by a TOML document with four sections, `model`,
//! `train`, `data` and `augment`, usually written with dotted keys:
//!
//! ```toml
//! model.heads = 4
//! model.hidden = 32
//! train.lr = 0.01
//! data.train = "train.spke"
//! ```
//!
//! Missing keys take their defaults, unknown keys are rejected, and every
//! error names the offending key.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::blocks::ModelConfig;
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub delta_t_ms: f64,
    pub neuron_bin: u16,
    /// Padded length; the model's `time_steps` when absent.
    pub target_t: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            test: None,
            delta_t_ms: 10.0,
            neuron_bin: 5,
            target_t: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_t_ms > 0.0 && self.delta_t_ms.is_finite()) {
            return Err(Error::Config(format!("data.delta_t_ms must be > 0, got {}", self.delta_t_ms)));
        }
        if self.neuron_bin == 0 {
            return Err(Error::Config("data.neuron_bin must be >= 1".into()));
        }
        if self.target_t == Some(0) {
            return Err(Error::Config("data.target_t must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub augment: AugmentConfig,
}

const SECTIONS: [&str; 4] = ["model", "train", "data", "augment"];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        in_section("model", self.model.validate())?;
        in_section("train", self.train.validate())?;
        in_section("data", self.data.validate())?;
        in_section("augment", self.augment.validate())?;
        Ok(())
    }

    /// Padded length used for batching.
    pub fn target_t(&self) -> usize {
        self.data.target_t.unwrap_or(self.model.time_steps)
    }

    /// Fully resolved TOML text; parsing it yields `self` again.
    pub fn echo(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

fn in_section(section: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config(m) if !m.contains(&format!("{section}.")) => Error::Config(format!("{section}: {m}")),
        other => other,
    })
}

/// Check one `section.key = value` pair in isolation so that the error can
/// name it.
fn check_key<T: DeserializeOwned>(section: &str, key: &str, value: &toml::Value) -> Result<()> {
    let mut t = toml::Table::new();
    t.insert(key.to_string(), value.clone());
    match T::deserialize(toml::Value::Table(t)) {
        Ok(_) => Ok(()),
        Err(e) if e.to_string().contains("unknown field") => {
            Err(Error::Config(format!("unknown key `{section}.{key}`")))
        }
        Err(e) => Err(Error::Config(format!("key `{section}.{key}`: {}", e.to_string().trim()))),
    }
}

/// Parse and validate configuration text.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("malformed config: {}", e.to_string().trim())))?;
    for (section, body) in &doc {
        if !SECTIONS.contains(&section.as_str()) {
            return Err(Error::Config(format!("unknown key `{section}`")));
        }
        let toml::Value::Table(fields) = body else {
            return Err(Error::Config(format!("key `{section}`: expected a table of settings")));
        };
        for (key, value) in fields {
            match section.as_str() {
                "model" => check_key::<ModelConfig>(section, key, value)?,
                "train" => check_key::<TrainConfig>(section, key, value)?,
                "data" => check_key::<DataConfig>(section, key, value)?,
                _ => check_key::<AugmentConfig>(section, key, value)?,
            }
        }
    }
    let cfg = RunConfig::deserialize(toml::Value::Table(doc))
        .map_err(|e| Error::Config(format!("invalid config: {}", e.to_string().trim())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}
