//! The TOML configuration file: one optional section per subsystem, every
//! field optional with library defaults.

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;
use splatloc::harness::SceneSpec;
use splatloc::localize::{LocalizeConfig, RefineConfig};
use splatloc::mapping::TrainConfig;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub scene: Option<SceneSpec>,
    pub train: Option<TrainConfig>,
    pub refine: Option<RefineConfig>,
    pub localize: Option<LocalizeConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: FileConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    pub fn scene(&self) -> SceneSpec {
        self.scene.clone().unwrap_or_default()
    }

    pub fn train(&self) -> TrainConfig {
        self.train.clone().unwrap_or_default()
    }

    pub fn refine(&self) -> RefineConfig {
        self.refine.clone().unwrap_or_default()
    }

    pub fn localize(&self) -> LocalizeConfig {
        self.localize.clone().unwrap_or_default()
    }
}
