//! Run configuration: one TOML document with a section per stage. Every
//! command-line flag overrides one field of it.

use std::path::Path;

use anyhow::{Context, Result};
use chordjam::corpus::{CorpusConfig, SplitSpec};
use chordjam::finetune::{FinetuneConfig, Preset};
use chordjam::reward::RewardConfig;
use chordjam::seqmodel::{OfflineModelConfig, OnlineModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Sampling temperature for aggregate metrics.
    pub temperature: f64,
    /// Decoding temperature for adaptation curves.
    pub adapt_temperature: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            temperature: 1.0,
            adapt_temperature: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub tempo: f64,
    pub temperature: f64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            tempo: 120.0,
            temperature: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub split: SplitSpec,
    pub online: OnlineModelConfig,
    pub offline: OfflineModelConfig,
    /// MLE training of the online and offline models.
    pub train: TrainConfig,
    pub reward: RewardConfig,
    pub reward_train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
    /// The `[finetune]` table as written, layered over a preset's defaults.
    #[serde(skip)]
    finetune_table: toml::Table,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        let raw: toml::Table = toml::from_str(text)?;
        if let Some(toml::Value::Table(t)) = raw.get("finetune") {
            cfg.finetune_table = t.clone();
        }
        Ok(cfg)
    }

    /// The preset's configuration with the file's `[finetune]` keys on top.
    pub fn finetune_for(&self, preset: Preset) -> Result<FinetuneConfig> {
        let mut base = toml::Table::try_from(preset.config())?;
        merge(&mut base, &self.finetune_table);
        Ok(base.try_into()?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}
