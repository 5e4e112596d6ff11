//! Pipeline settings loaded from TOML.
//!
//! ```toml
//! seed = 42
//! budget = 512
//! ratios = "8:1:1"
//! normalization = "no-normalization"
//!
//! [endpoint]
//! url = "http://localhost:8000/v1/chat/completions"
//! model = "my-model"
//! ```
//!
//! Every key is optional.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::dataset::SplitRatios;
use crate::eval::EndpointConfig;
use crate::perturb::normalize::NormalizationRule;
use crate::slice::DEFAULT_BUDGET;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error("split ratios must sum to 10, got {0}")]
    RatioSum(SplitRatios),
    #[error("token budget must be positive")]
    ZeroBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub budget: usize,
    #[serde(serialize_with = "ratios_ser", deserialize_with = "ratios_de")]
    pub ratios: SplitRatios,
    pub normalization: NormalizationRule,
    pub endpoint: EndpointConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            budget: DEFAULT_BUDGET,
            ratios: SplitRatios::default(),
            normalization: NormalizationRule::default(),
            endpoint: EndpointConfig::default(),
        }
    }
}

fn ratios_ser<S: Serializer>(r: &SplitRatios, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&r.to_string())
}

fn ratios_de<'de, D: Deserializer<'de>>(d: D) -> Result<SplitRatios, D::Error> {
    String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: PipelineConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.ratios.total() != 10 {
            return Err(ConfigError::RatioSum(self.ratios));
        }
        if self.budget == 0 {
            return Err(ConfigError::ZeroBudget);
        }
        Ok(())
    }
}
