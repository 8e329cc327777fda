use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::NetworkConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    fn validate(&self, which: &str) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Validation(format!("invalid {which} optimizer settings: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Target slot from a single reference image per source.
    #[default]
    Instance,
    /// Target slot is the mean over the reference batch; no attribute cycle.
    Domain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub generator_optimizer: AdamConfig,
    #[serde(default)]
    pub discriminator_optimizer: AdamConfig,
    pub weights: LossWeights,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default)]
    pub multiplex_augment_prob: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub network: NetworkConfig,
    /// Discriminator updates per generator update.
    #[serde(default = "one")]
    pub discriminator_steps: usize,
    /// EMA rate of the registry frozen into checkpoints.
    #[serde(default = "default_registry_decay")]
    pub registry_decay: f64,
    #[serde(default)]
    pub precision: Precision,
}

fn one() -> usize {
    1
}

fn default_registry_decay() -> f64 {
    0.01
}

impl TrainConfig {
    /// Sprite run at 64x64 with base 16, batch 16, weights `(1, 10, 10)`.
    pub fn desk(iterations: u64) -> Self {
        Self {
            iterations,
            batch_size: 16,
            generator_optimizer: AdamConfig::default(),
            discriminator_optimizer: AdamConfig::default(),
            weights: LossWeights::instance_default(),
            mode: TrainMode::Instance,
            multiplex_augment_prob: 0.0,
            checkpoint_every: 500,
            seed: 0,
            network: NetworkConfig::desk(),
            discriminator_steps: 1,
            registry_decay: 0.01,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Validation("checkpoint_every must be at least 1".into()));
        }
        if self.discriminator_steps == 0 {
            return Err(Error::Validation("discriminator_steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.multiplex_augment_prob) {
            return Err(Error::Validation(format!(
                "multiplex_augment_prob {} outside [0, 1]",
                self.multiplex_augment_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.registry_decay) {
            return Err(Error::Validation("registry_decay outside [0, 1]".into()));
        }
        self.generator_optimizer.validate("generator")?;
        self.discriminator_optimizer.validate("discriminator")?;
        self.effective_weights().validate()?;
        self.network.validate()
    }

    /// Weights actually optimized: domain mode drops the attribute term.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.mode == TrainMode::Domain {
            w.lambda3 = 0.0;
        }
        w
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// True if `other` describes the same run apart from its length and
    /// checkpoint cadence.
    pub fn resumable_from(&self, other: &TrainConfig) -> bool {
        let strip = |c: &TrainConfig| TrainConfig {
            iterations: 0,
            checkpoint_every: 1,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}
