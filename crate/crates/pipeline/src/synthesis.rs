//! Sampling trained generators, the three-stage postprocessing, latent
//! interpolation and synthetic-dataset export.

use crate::checkpoint::{BuiltNet, Checkpoint, NetState};
use crate::config::ModelKind;
use crate::{PipelineError, Result};
use cranio_autodiff::Graph;
use cranio_core::dataset::GeneratorInfo;
use cranio_core::morphology::default_min_component_size;
use cranio_core::{
    binarize, derive_seed, remove_small_components, separate_defect, Connectivity, Dataset,
    DatasetSample, RealVolume, SkullSample, Split,
};
use cranio_model::nets::{bind_params, Generator};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    /// Number of valid samples to emit.
    pub count: usize,
    pub latent_seed: u64,
    pub binarize_threshold: f32,
    /// Minimum connected-component size; `None` applies the resolution
    /// default (0.005% of the voxel count, at least 1).
    pub min_component_size: Option<usize>,
    pub connectivity: Connectivity,
    /// Generator forward batch.
    pub batch: usize,
    /// Degenerate samples are redrawn up to `oversample_factor * count`
    /// total draws before synthesis gives up.
    pub oversample_factor: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            count: 100,
            latent_seed: 0,
            binarize_threshold: 0.5,
            min_component_size: None,
            connectivity: Connectivity::TwentySix,
            batch: 8,
            oversample_factor: 5,
        }
    }
}

/// A generator rebuilt from a checkpoint, ready for inference.
pub struct GeneratorHandle {
    pub net: Generator,
    pub state: NetState,
    /// Raw outputs need a clamp into [0, 1] (no output sigmoid).
    pub clamp_output: bool,
    pub checkpoint_sha256: String,
}

/// Picks the producing network out of a checkpoint: the decoder for the
/// VAE, the generator otherwise.
pub fn load_generator(ckpt: &Checkpoint) -> Result<GeneratorHandle> {
    let net_name = match ckpt.model_kind {
        ModelKind::Vae => "decoder",
        ModelKind::WganGp | ModelKind::VaeWganGp | ModelKind::IntroVae => "generator",
        ModelKind::Vnet => {
            return Err(PipelineError::InvalidArgument(
                "a v-net checkpoint cannot generate samples".into(),
            ))
        }
    };
    let state = ckpt
        .find_net(net_name)
        .ok_or_else(|| PipelineError::Checkpoint(format!("checkpoint has no net {net_name:?}")))?
        .clone();
    let built = state.arch.build()?;
    let BuiltNet::Generator(net) = built else {
        return Err(PipelineError::Checkpoint(format!(
            "net {net_name:?} is not a generator"
        )));
    };
    let clamp_output = !net.cfg.final_sigmoid;
    Ok(GeneratorHandle {
        net,
        state,
        clamp_output,
        checkpoint_sha256: ckpt.sha256_hex(),
    })
}

/// Standard-normal latent codes, deterministic under the seed.
pub fn sample_latents(n: usize, latent_dim: usize, seed: u64) -> Result<ArrayD<f32>> {
    if n == 0 {
        return Err(PipelineError::InvalidArgument(
            "latent count must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..n * latent_dim).map(|_| rng.sample(StandardNormal)).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&[n, latent_dim]), data).unwrap())
}

/// A generated two-channel volume before postprocessing.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub skull: RealVolume,
    pub defect: RealVolume,
}

/// Inference-mode decoding of latent codes into raw two-channel volumes.
pub fn generate_raw(handle: &mut GeneratorHandle, codes: &ArrayD<f32>) -> Result<Vec<RawSample>> {
    let shape = codes.shape().to_vec();
    if shape.len() != 2 || shape[1] != handle.net.cfg.latent_dim {
        return Err(PipelineError::Model(cranio_model::ModelError::Shape(
            format!(
                "latent codes {:?} do not match latent_dim {}",
                shape, handle.net.cfg.latent_dim
            ),
        )));
    }
    let res = handle.net.cfg.resolution;
    let mut out = Vec::with_capacity(shape[0]);
    let mut g: Graph<f32> = Graph::new();
    let params = bind_params(&mut g, &handle.state.params);
    let z = g.leaf(codes.clone());
    let vols = handle
        .net
        .forward(&mut g, &params, z, false, &mut handle.state.params.buffers)?;
    let v = g.value(vols);
    for i in 0..shape[0] {
        let one = v.index_axis(ndarray::Axis(0), i);
        let mut skull = Vec::with_capacity(res * res * res);
        let mut defect = Vec::with_capacity(res * res * res);
        for zz in 0..res {
            for yy in 0..res {
                for xx in 0..res {
                    skull.push(one[[zz, yy, xx, 0]]);
                    defect.push(one[[zz, yy, xx, 1]]);
                }
            }
        }
        let mut skull = RealVolume::from_raw([res, res, res], skull)?;
        let mut defect = RealVolume::from_raw([res, res, res], defect)?;
        if handle.clamp_output {
            skull.clamp_unit();
            defect.clamp_unit();
        }
        skull.validate()?;
        defect.validate()?;
        out.push(RawSample { skull, defect });
    }
    Ok(out)
}

fn resolve_min_size(cfg: &SynthesisConfig, dims: [usize; 3]) -> usize {
    cfg.min_component_size
        .unwrap_or_else(|| default_min_component_size(dims))
}

/// Three-stage postprocessing without the degeneracy check: binarize both
/// channels, separate the defect from the skull, drop small components.
pub fn postprocess_lenient(raw: &RawSample, cfg: &SynthesisConfig) -> Result<SkullSample> {
    let skull = binarize(&raw.skull, cfg.binarize_threshold)?;
    let defect = binarize(&raw.defect, cfg.binarize_threshold)?;
    let defect = separate_defect(&defect, &skull)?;
    let min_size = resolve_min_size(cfg, skull.dims());
    let skull = remove_small_components(&skull, min_size, cfg.connectivity)?;
    let defect = remove_small_components(&defect, min_size, cfg.connectivity)?;
    // the defect was disjoint from the pre-cleanup skull, and cleanup only
    // removes voxels, so the pair stays disjoint
    Ok(SkullSample::new(skull, defect)?)
}

/// Postprocessing with the degeneracy contract: an empty skull or defect
/// channel is an error so synthesis can discard and redraw.
pub fn postprocess(raw: &RawSample, cfg: &SynthesisConfig) -> Result<SkullSample> {
    let sample = postprocess_lenient(raw, cfg)?;
    if sample.defective_skull.is_blank() {
        return Err(PipelineError::Degenerate { which: "skull" });
    }
    if sample.defect.is_blank() {
        return Err(PipelineError::Degenerate { which: "defect" });
    }
    Ok(sample)
}

/// Generates `cfg.count` valid samples as an in-memory dataset, redrawing
/// degenerate ones within the oversampling budget. The manifest records the
/// generator checkpoint hash, the latent seed, and the discard count.
pub fn synthesize_dataset(ckpt: &Checkpoint, cfg: &SynthesisConfig) -> Result<Dataset> {
    if cfg.count == 0 {
        return Err(PipelineError::InvalidArgument("count must be >= 1".into()));
    }
    let mut handle = load_generator(ckpt)?;
    let res = handle.net.cfg.resolution;
    let latent_dim = handle.net.cfg.latent_dim;
    let budget = cfg.count * cfg.oversample_factor.max(1);
    let mut samples = Vec::with_capacity(cfg.count);
    let mut drawn = 0usize;
    let mut discarded = 0usize;
    let mut chunk = 0u64;
    while samples.len() < cfg.count && drawn < budget {
        let want = (cfg.count - samples.len()).min(cfg.batch).min(budget - drawn);
        let codes = sample_latents(want, latent_dim, derive_seed(cfg.latent_seed, 0x5a, chunk))?;
        chunk += 1;
        drawn += want;
        for raw in generate_raw(&mut handle, &codes)? {
            match postprocess(&raw, cfg) {
                Ok(sample) => {
                    let id = samples.len();
                    samples.push(DatasetSample {
                        sample,
                        split: Split::Train,
                        skull_id: id,
                        class: None,
                        defect_seed: 0,
                    });
                }
                Err(PipelineError::Degenerate { which }) => {
                    discarded += 1;
                    log::debug!("discarded degenerate sample (empty {which})");
                }
                Err(e) => return Err(e),
            }
        }
    }
    if samples.len() < cfg.count {
        return Err(PipelineError::Quality(format!(
            "only {} of {} samples were valid after {} draws; train the generator further",
            samples.len(),
            cfg.count,
            drawn
        )));
    }
    samples.truncate(cfg.count);
    Ok(Dataset {
        kind: "synthetic".into(),
        resolution: [res; 3],
        seed: cfg.latent_seed,
        samples,
        complete_skulls: Vec::new(),
        generator: Some(GeneratorInfo {
            checkpoint_sha256: handle.checkpoint_sha256.clone(),
            latent_seed: cfg.latent_seed,
            discarded,
        }),
    })
}

/// Linear latent interpolation `z(t) = (1-t) z1 + t z2` at `steps` evenly
/// spaced points, each decoded and postprocessed (degenerate intermediates
/// are kept as-is).
pub fn interpolate_latent(
    ckpt: &Checkpoint,
    z1: &[f32],
    z2: &[f32],
    steps: usize,
    cfg: &SynthesisConfig,
) -> Result<Vec<SkullSample>> {
    if steps < 2 {
        return Err(PipelineError::InvalidArgument(format!(
            "steps {steps} must be >= 2"
        )));
    }
    let mut handle = load_generator(ckpt)?;
    let latent_dim = handle.net.cfg.latent_dim;
    if z1.len() != latent_dim || z2.len() != latent_dim {
        return Err(PipelineError::Model(cranio_model::ModelError::Shape(
            format!(
                "endpoints have lengths {} and {}, latent_dim is {latent_dim}",
                z1.len(),
                z2.len()
            ),
        )));
    }
    let mut codes = ArrayD::<f32>::zeros(IxDyn(&[steps, latent_dim]));
    for s in 0..steps {
        let t = s as f32 / (steps - 1) as f32;
        for d in 0..latent_dim {
            codes[[s, d]] = (1.0 - t) * z1[d] + t * z2[d];
        }
    }
    let raws = generate_raw(&mut handle, &codes)?;
    raws.iter().map(|r| postprocess_lenient(r, cfg)).collect()
}
