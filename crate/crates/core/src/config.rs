//! Experiment configuration: one TOML document aggregating every module's
//! parameters plus run-level knobs (cost weight, master seed, episode
//! budget). Every section and field is optional in the file; omitted values
//! take the library defaults, so a config can be as small as a few
//! overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::bench::{BaselineConfig, BenchConfig};
use crate::dp::DpConfig;
use crate::powertrain::PowertrainParams;
use crate::traffic::TrafficConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse {path}: {source}")]
    Parse {
        path: String,
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Everything a run needs, in one file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Weight on fuel mass flow in the stage cost; (1 - lambda) weighs
    /// elapsed time.
    pub lambda: f64,
    /// Master seed for network initialization and exploration noise.
    pub seed: u64,
    /// Training episodes for the `train` verb.
    pub episodes: usize,
    pub powertrain: PowertrainParams,
    pub traffic: TrafficConfig,
    pub dp: DpConfig,
    pub agent: AgentConfig,
    pub baseline: BaselineConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            lambda: 0.45,
            seed: 1,
            episodes: 100,
            powertrain: PowertrainParams::default(),
            traffic: TrafficConfig::default(),
            dp: DpConfig::default(),
            agent: AgentConfig::default(),
            baseline: BaselineConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            source: Box::new(e),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ConfigError::Invalid(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        self.dp
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        // The route generator owns the traffic-config checks; probe it once.
        crate::traffic::Route::generate(&self.traffic, 0)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.agent.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }
}
