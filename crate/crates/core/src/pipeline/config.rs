//! Structured text configuration for every stage.
//!
//! The file is TOML. Every table is optional and falls back to the desk-scale
//! defaults below; [`PipelineConfig::full_scale`] holds the reference training
//! values for comparison. Schema:
//!
//! ```toml
//! seed = 0
//!
//! [editor]        # toy rectified-flow backbone
//! width = 64
//! heads = 4
//! patch = 4
//! double_blocks = 2
//! single_blocks = 4
//! mlp_ratio = 2
//! channels = 3
//! pixel_features = 16
//! pixel_hidden = 32
//!
//! [pretrain]      # stand-in for a pretrained editing prior
//! steps = 6000
//! image_size = 32
//! lr = 2e-3
//! endpoint_fraction = 0.5
//! seed = 7
//!
//! [lora]
//! rule = "last_k" # reference | last_k | all | early
//! rank = 4
//! scale = 1.0
//!
//! [loss]
//! lambda_gd = 0.4
//! lambda_le = 0.6
//! timestep = 261
//! horizon = 1000
//! lefl_patch = 16          # 96 at full scale
//! localization_patch = 8   # 32 at full scale
//! confidence_threshold = 0.5
//! anchor_weight = 0.0
//!
//! [train]
//! steps = 2000
//! batch_size = 1
//! seed = 0
//! strength = 1.0
//! [train.optimizer]
//! lr = 1e-4
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//! weight_decay = 0.0
//!
//! [lifter]
//! patch = 2
//! width = 48
//! sh_degree = 1
//!
//! [lift_train]
//! steps = 2000
//! lr = 2e-3
//!
//! [synth]
//! image_size = 32
//!
//! [protocol]
//! views = 4
//! resolution = 256
//! strength = 1.0
//! orbit_deg = 12.0
//! ```
//!
//! `loss.tap_block` may be set to pin the compared block; it defaults to
//! the second-to-last.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consistency::{LossConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::flow_editor::{EditorConfig, PretrainConfig};
use crate::lifting::{LiftTrainConfig, LifterConfig};
use crate::lora::PlacementRule;
use crate::perception::ToyEmbedderConfig;
use crate::rasterizer::RasterConfig;

use super::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rule: PlacementRule,
    pub rank: usize,
    pub scale: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rule: PlacementRule::LastK,
            rank: 4,
            scale: 1.0,
        }
    }
}

/// Evaluation protocol of one edited scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    /// Novel views rendered per scene.
    pub views: usize,
    /// Square side of every rendered and scored image.
    pub resolution: usize,
    /// Edit strength at inference.
    pub strength: f64,
    /// Azimuth half-span of the default novel orbit when the input carries
    /// no poses of its own.
    pub orbit_deg: f64,
    /// Seed of the inference noise.
    pub noise_seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            views: 4,
            resolution: 256,
            strength: 1.0,
            orbit_deg: 12.0,
            noise_seed: 11,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.resolution == 0 {
            return Err(Error::Config("protocol needs at least one view and a positive resolution".into()));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(Error::Config(format!("strength {} outside (0, 1]", self.strength)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub editor: EditorConfig,
    pub pretrain: PretrainConfig,
    pub lora: LoraConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub lifter: LifterConfig,
    pub lift_train: LiftTrainConfig,
    pub synth: SynthConfig,
    pub protocol: ProtocolConfig,
    pub raster: RasterConfig,
    pub embedder: ToyEmbedderConfig,
}

impl PipelineConfig {
    /// Reference training values at reference resolution. The toy networks
    /// stay toy-sized; only hyperparameters change.
    pub fn full_scale() -> Self {
        Self {
            loss: LossConfig::full_scale(),
            synth: SynthConfig {
                image_size: 192,
                ..SynthConfig::default()
            },
            pretrain: PretrainConfig {
                image_size: 192,
                ..PretrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.editor.validate()?;
        self.loss.validate()?;
        self.lifter.validate()?;
        self.protocol.validate()?;
        if self.lora.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}
