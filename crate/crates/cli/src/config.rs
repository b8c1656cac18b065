//! Declarative run configuration: a JSON file with one section per command,
//! merged with command-line overrides (flag > file > built-in default).

use cranio_core::PhantomParams;
use cranio_pipeline::config::{ModelKind, TrainConfig};
use cranio_pipeline::synthesis::SynthesisConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Default desk-scale resolution (the full-scale study uses 128).
pub const DEFAULT_RESOLUTION: usize = 32;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; sections without an explicit seed derive from it.
    pub seed: Option<u64>,
    /// Output root; overridden by `--out`, falls back to
    /// `$CRANIO_SYNTH_OUT`, then `./runs`.
    pub out: Option<PathBuf>,
    pub phantom: PhantomSection,
    pub train: TrainSection,
    pub generate: GenerateSection,
    pub eval: EvalSection,
    pub embed: EmbedSection,
    pub interp: InterpSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&raw).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub n_skulls: usize,
    pub resolution: usize,
    /// (train, validation, test) fractions, summing to 1.
    pub fractions: [f64; 3],
    /// Full phantom geometry; omitted fields come from the resolution
    /// default.
    pub params: Option<PhantomParams>,
    pub dir: Option<PathBuf>,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self {
            n_skulls: 10,
            resolution: DEFAULT_RESOLUTION,
            fractions: [0.8, 0.0, 0.2],
            params: None,
            dir: None,
        }
    }
}

impl PhantomSection {
    pub fn resolved_params(&self, seed: u64) -> PhantomParams {
        let mut p = self
            .params
            .clone()
            .unwrap_or_else(|| PhantomParams::for_resolution(self.resolution));
        p.seed = seed;
        p
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Dataset directory (a phantom or synthetic layout).
    pub data: Option<PathBuf>,
    pub config: Option<TrainConfig>,
    pub model_kind: Option<ModelKind>,
    pub resolution: Option<usize>,
    pub dir: Option<PathBuf>,
}

#[allow(clippy::derivable_impls)]
impl Default for TrainSection {
    fn default() -> Self {
        Self {
            data: None,
            config: None,
            model_kind: None,
            resolution: None,
            dir: None,
        }
    }
}

impl TrainSection {
    /// Resolves the training config: explicit `config` wins, otherwise
    /// defaults for the section's model kind and resolution.
    pub fn resolved_config(&self) -> TrainConfig {
        match &self.config {
            Some(c) => {
                let mut c = c.clone();
                if let Some(k) = self.model_kind {
                    c.model_kind = k;
                }
                if let Some(r) = self.resolution {
                    c.resolution = r;
                }
                c
            }
            None => TrainConfig::defaults_for(
                self.model_kind.unwrap_or(ModelKind::Vae),
                self.resolution.unwrap_or(DEFAULT_RESOLUTION),
            ),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub checkpoint: Option<PathBuf>,
    pub synthesis: SynthesisConfig,
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    pub name: String,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub models: Vec<ModelRef>,
    /// Synthetic training-set sizes (desk-scale defaults).
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub vnet: Option<TrainConfig>,
    pub synthesis: Option<SynthesisConfig>,
    pub eval_resolution: usize,
    pub eval_case_cap: Option<usize>,
    pub include_baseline: bool,
    pub dir: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            models: Vec::new(),
            sizes: vec![50, 200, 1000],
            seeds: vec![0, 1, 2],
            train_data: None,
            test_data: None,
            vnet: None,
            synthesis: None,
            eval_resolution: DEFAULT_RESOLUTION,
            eval_case_cap: None,
            include_baseline: true,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    FlattenDownsampled,
    EncoderLatent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceRef {
    pub label: String,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedSection {
    pub sources: Vec<SourceRef>,
    pub mode: EmbedMode,
    /// Downsampled side length for the flatten mode.
    pub side: usize,
    /// Encoder checkpoint for the latent mode.
    pub checkpoint: Option<PathBuf>,
    pub dir: Option<PathBuf>,
}

impl Default for EmbedSection {
    fn default() -> Self {
        Self {
            sources: Vec::new(),
            mode: EmbedMode::FlattenDownsampled,
            side: 16,
            checkpoint: None,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpSection {
    pub checkpoint: Option<PathBuf>,
    /// Latent seeds for the two endpoints.
    pub latent_a: u64,
    pub latent_b: u64,
    pub steps: usize,
    pub synthesis: SynthesisConfig,
    pub dir: Option<PathBuf>,
}

impl Default for InterpSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            latent_a: 1,
            latent_b: 2,
            steps: 5,
            synthesis: SynthesisConfig::default(),
            dir: None,
        }
    }
}
