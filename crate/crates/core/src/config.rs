//! Run configuration files (TOML). Every key has a default; unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::NetConfig;
use crate::synthdata::DatasetConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory read by `train` and `eval`, written by `render-data`.
    pub data_dir: Option<PathBuf>,
    /// Run directory for logs, checkpoints and reports.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub network: NetConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

/// File name of the resolved configuration echoed into run directories.
pub const ECHO_FILE: &str = "config.resolved.toml";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks every section and their agreement with each other.
    pub fn validate(&self) -> Result<()> {
        let tag = |section: &str, e: Error| match e {
            Error::InvalidArgument { detail, .. } => Error::Config(format!("[{section}] {detail}")),
            other => other,
        };
        self.data.validate().map_err(|e| tag("data", e))?;
        self.network.validate().map_err(|e| tag("network", e))?;
        self.train.validate().map_err(|e| tag("train", e))?;
        if self.data.scene.resolution != self.network.resolution {
            return Err(Error::Config(format!(
                "data.scene.resolution {} differs from network.resolution {}",
                self.data.scene.resolution, self.network.resolution
            )));
        }
        let (scene, net) = (&self.data.scene, &self.network);
        if scene.depth_min != net.depth_min || scene.depth_max != net.depth_max {
            return Err(Error::Config("data.scene depth range differs from the network depth range".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("[train]\nstepz = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("stepz"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.steps = 7;
        cfg.train.weights.omega_s = 0.25;
        cfg.train.learning_rate = 3e-4;
        cfg.paths.out_dir = Some("runs/a".into());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let err = RunConfig::from_toml("[train]\nsteps = 0\n").unwrap_err();
        assert!(err.is_usage());
        assert!(RunConfig::from_toml("[network]\nresolution = 32\n").is_err());
    }
}
