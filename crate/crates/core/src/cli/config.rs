//! TOML run configuration.
//!
//! Every section and key is optional; missing keys take the defaults shown by
//! `sassl init-config`. Unknown keys are rejected. An absent `[policy]` table
//! means the default policy, style block included; once `[policy]` is
//! given, the style block is enabled by the presence of `[policy.sassl]`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augpipe::AugPolicy;
use crate::error::{Error, Result};
use crate::eval::{ProbeConfig, SynthSpec};
use crate::nst::StylizerConfig;
use crate::ssltrain::{ModelConfig, TrainConfig};

/// File locations. Relative paths are resolved against the working directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory written by `gen-data`; synthesized from `[synth]` when unset.
    pub data: Option<PathBuf>,
    /// Style bank; a bank is built from generated style images when unset.
    pub bank: Option<PathBuf>,
    /// Style-engine weights checkpoint; seeded weights when unset.
    pub weights: Option<PathBuf>,
}

/// Style-transfer engine used for augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleConfig {
    pub stylizer: StylizerConfig,
    pub extractor_seed: u64,
    pub stylizer_seed: u64,
    /// Circular shift `b0` of in-batch stylization.
    pub inbatch_offset: usize,
    /// Number of generated style images when no bank path is given.
    pub generated_styles: usize,
    pub style_image_size: usize,
    pub style_seed: u64,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            stylizer: StylizerConfig::default(),
            extractor_seed: 1,
            stylizer_seed: 2,
            inbatch_offset: 1,
            generated_styles: 64,
            style_image_size: 32,
            style_seed: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub synth: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub policy: AugPolicy,
    pub style: StyleConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.policy.validate()?;
        self.style.stylizer.styled_layers.ids()?;
        if self.style.stylizer.width == 0 || self.style.stylizer.embedding_dim == 0 {
            return Err(Error::Config("stylizer width and embedding_dim must be positive".into()));
        }
        if self.style.style_image_size < 16 {
            return Err(Error::Config("style.style_image_size must be at least 16".into()));
        }
        if self.probe.epochs == 0 || !(self.probe.learning_rate > 0.0) {
            return Err(Error::Config("probe needs epochs >= 1 and a positive learning rate".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> [u8; 32] {
        super::checkpoint::config_hash(&self.to_toml())
    }
}
