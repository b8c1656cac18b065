//! Training configuration and per-model hyperparameter defaults.

use crate::{PipelineError, Result};
use cranio_model::losses::{IntroVaeConfig, WganGpConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vae,
    WganGp,
    VaeWganGp,
    IntroVae,
    Vnet,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::WganGp => "wgan_gp",
            ModelKind::VaeWganGp => "vae_wgan_gp",
            ModelKind::IntroVae => "introvae",
            ModelKind::Vnet => "vnet",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "vae" => Some(ModelKind::Vae),
            "wgan_gp" => Some(ModelKind::WganGp),
            "vae_wgan_gp" => Some(ModelKind::VaeWganGp),
            "introvae" => Some(ModelKind::IntroVae),
            "vnet" => Some(ModelKind::Vnet),
            _ => None,
        }
    }
}

/// Early stop on a plateau of the epoch-mean primary loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    /// Relative epoch-to-epoch change below which an epoch counts as flat.
    pub rel_tol: f64,
    /// Number of consecutive flat epochs that triggers the stop.
    pub patience: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rel_tol: 1e-3,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub resolution: usize,
    pub latent_dim: usize,
    pub base_channels: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub wgan: WganGpConfig,
    pub intro: IntroVaeConfig,
    /// IntroVAE epochs trained with alpha = 0 before the adversarial phase.
    pub intro_warmup_epochs: usize,
    /// Hybrid stage 1: VAE pretraining epochs.
    pub vae_pretrain_epochs: usize,
    /// Hybrid stage 2: epochs fed with reparameterized encoder latents.
    pub latent_feed_epochs: usize,
    pub vnet_levels: usize,
    pub seed: u64,
    /// Steps between stderr progress lines.
    pub log_interval: usize,
    /// Epochs between checkpoint snapshots (0 = final checkpoint only).
    pub checkpoint_interval_epochs: usize,
    pub early_stop: EarlyStopConfig,
    /// Optional hard cap on update steps (cycles for adversarial models).
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::defaults_for(ModelKind::Vae, 32)
    }
}

/// Default channel width: 32 at 128-resolution, 16 at 32 and below.
pub fn default_base_channels(resolution: usize) -> usize {
    if resolution > 32 {
        32
    } else {
        16
    }
}

impl TrainConfig {
    /// Paper-faithful optimizer defaults per model kind.
    pub fn defaults_for(kind: ModelKind, resolution: usize) -> Self {
        let (lr, b1, b2) = match kind {
            ModelKind::WganGp | ModelKind::VaeWganGp => (2e-4, 0.5, 0.9),
            ModelKind::Vae | ModelKind::IntroVae => (1e-3, 0.9, 0.999),
            ModelKind::Vnet => (1e-4, 0.9, 0.999),
        };
        Self {
            model_kind: kind,
            resolution,
            latent_dim: 200,
            base_channels: default_base_channels(resolution),
            batch_size: 8,
            learning_rate: lr,
            adam_beta1: b1,
            adam_beta2: b2,
            epochs: 30,
            wgan: WganGpConfig::default(),
            intro: IntroVaeConfig::default(),
            intro_warmup_epochs: 3,
            vae_pretrain_epochs: 10,
            latent_feed_epochs: 15,
            vnet_levels: 3,
            seed: 0,
            log_interval: 50,
            checkpoint_interval_epochs: 0,
            early_stop: EarlyStopConfig::default(),
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(PipelineError::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(PipelineError::Config("epochs must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(PipelineError::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(PipelineError::Config(format!(
                "adam betas ({}, {}) must lie in [0, 1)",
                self.adam_beta1, self.adam_beta2
            )));
        }
        if self.latent_dim == 0 && self.model_kind != ModelKind::Vnet {
            return Err(PipelineError::Config("latent_dim must be >= 1".into()));
        }
        self.wgan.validate()?;
        self.intro.validate()?;
        if self.model_kind == ModelKind::VaeWganGp
            && self.epochs <= self.vae_pretrain_epochs + self.latent_feed_epochs
        {
            return Err(PipelineError::Config(format!(
                "hybrid needs epochs > {} (stages 1 + 2)",
                self.vae_pretrain_epochs + self.latent_feed_epochs
            )));
        }
        if self.model_kind == ModelKind::IntroVae && self.epochs <= self.intro_warmup_epochs {
            return Err(PipelineError::Config(format!(
                "introvae needs epochs > warmup {}",
                self.intro_warmup_epochs
            )));
        }
        Ok(())
    }
}
