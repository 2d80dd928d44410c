//! Training configuration, read from and written to TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::{AdversarialForm, LossWeights};
use crate::nn::AdamConfig;
use crate::polar::{OutOfBounds, PolarParams};
use crate::retrieval::{AggregationConfig, StreetEncoderConfig};

/// Which parts of the model take part in training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Generator, discriminator and retrieval branch.
    #[default]
    Full,
    /// Generator encoder and retrieval branch only, trained on the ranking loss.
    RetrievalOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningMode {
    #[default]
    Off,
    /// Switch on at `start_step`.
    AtStep,
    /// Switch on once the ranking loss stops improving.
    Plateau,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    pub mode: MiningMode,
    pub start_step: u64,
    /// Plateau detection compares the mean ranking loss of the last `window`
    /// steps against the `window` steps before.
    pub window: usize,
    /// Relative improvement below which the loss counts as converged.
    pub threshold: f64,
    /// Fraction of triplets kept once mining is active.
    pub keep_fraction: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            mode: MiningMode::Off,
            start_step: 0,
            window: 50,
            threshold: 0.01,
            keep_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Random paired horizontal flips.
    pub flip: bool,
    /// Random paired circular shifts along the azimuth axis.
    pub shift: bool,
    pub out_of_bounds: OutOfBounds,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            flip: true,
            shift: false,
            out_of_bounds: OutOfBounds::Clamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub generator_channels: usize,
    pub bottleneck_blocks: usize,
    pub discriminator_channels: usize,
    pub street_channels: usize,
    pub street_blocks: [usize; 3],
    pub aggregation: AggregationConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let s = StreetEncoderConfig::default();
        Self {
            generator_channels: g.base_channels,
            bottleneck_blocks: g.bottleneck_blocks,
            discriminator_channels: DiscriminatorConfig::default().base_channels,
            street_channels: s.base_channels,
            street_blocks: s.blocks,
            aggregation: AggregationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: u64,
    pub variant: Variant,
    pub adversarial: AdversarialForm,
    pub optimizer: AdamConfig,
    pub losses: LossWeights,
    pub mining: MiningConfig,
    pub data: DataConfig,
    pub geometry: PolarParams,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 32,
            total_steps: 1000,
            checkpoint_every: 0,
            variant: Variant::Full,
            adversarial: AdversarialForm::NonSaturating,
            optimizer: AdamConfig::default(),
            losses: LossWeights::default(),
            mining: MiningConfig::default(),
            data: DataConfig::default(),
            geometry: PolarParams::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Hex SHA-256 of the TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            base_channels: self.model.generator_channels,
            bottleneck_blocks: self.model.bottleneck_blocks,
            height: self.geometry.polar_height,
            width: self.geometry.polar_width,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_channels: self.model.discriminator_channels,
        }
    }

    pub fn street_encoder(&self) -> StreetEncoderConfig {
        StreetEncoderConfig {
            base_channels: self.model.street_channels,
            blocks: self.model.street_blocks,
        }
    }

    /// Length of one retrieval descriptor.
    pub fn descriptor_len(&self) -> usize {
        self.model.aggregation.masks * self.generator().bottleneck_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        let o = &self.optimizer;
        if !(o.learning_rate.is_finite() && o.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be >= 0, got {}", o.learning_rate));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        self.losses.validate()?;
        let m = &self.mining;
        if !(m.keep_fraction > 0.0 && m.keep_fraction <= 1.0) {
            return bad(format!("mining.keep_fraction must be in (0, 1], got {}", m.keep_fraction));
        }
        if m.mode == MiningMode::Plateau && m.window == 0 {
            return bad("mining.window must be >= 1".into());
        }
        self.geometry.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.generator().validate()?;
        if self.model.discriminator_channels == 0 || self.model.street_channels == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.street_encoder().out_channels() != self.generator().bottleneck_channels() {
            return bad(format!(
                "street encoder emits {} channels but the generator bottleneck has {}",
                self.street_encoder().out_channels(),
                self.generator().bottleneck_channels()
            ));
        }
        Ok(())
    }
}
