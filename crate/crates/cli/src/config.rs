use anyhow::{bail, Context, Result};
use duda_core::model::ModelConfig;
use duda_core::scenegen::{CorruptionConfig, GenConfig, Split, SplitSizes};
use duda_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// File name of the resolved configuration stored in every output directory.
pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Master seed of the generated dataset.
    pub seed: u64,
    /// Where `generate-data` writes and `train`/`eval` read.
    pub dir: PathBuf,
    pub sizes: SplitSizes,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            seed: 0,
            dir: PathBuf::from("data"),
            sizes: SplitSizes::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: Split,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::TargetTest,
        }
    }
}

/// Everything that determines a run, as one TOML document. Every table and
/// key is optional; missing ones take their defaults, unknown ones are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub generation: GenConfig,
    pub corruption: CorruptionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in config {}", p.display()))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        self.corruption.weather.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.detector.num_classes != self.generation.num_classes {
            bail!(
                "model.detector.num_classes ({}) differs from generation.num_classes ({})",
                self.model.detector.num_classes,
                self.generation.num_classes
            );
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
