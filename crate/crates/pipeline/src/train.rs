//! The five training pipelines: VAE, WGAN-GP, the three-step VAE/WGAN-GP
//! hybrid, IntroVAE, and the V-Net segmenter.
//!
//! Every pipeline is deterministic under its config seed (single-threaded
//! data delivery), checkpoints at a configurable epoch cadence, resumes
//! exactly from an epoch boundary, aborts with a checkpoint attached when a
//! loss turns non-finite, and early-stops on a plateau of the epoch-mean
//! primary loss (relative change below `rel_tol` for `patience` epochs,
//! evaluated in the final stage of staged pipelines).

use crate::checkpoint::{ArchConfig, Checkpoint, NetState, RngState};
use crate::config::{EarlyStopConfig, ModelKind, TrainConfig};
use crate::optim::{adam_step, AdamHyper};
use crate::trace::LossTrace;
use crate::{PipelineError, Result};
use cranio_autodiff::{Graph, NodeId};
use cranio_core::Dataset;
use cranio_model::losses::{
    critic_loss, dice_loss, generator_wgan_loss, introvae_encoder_loss,
    introvae_generator_loss, kl_standard_normal, reconstruction_loss, DiceLossConfig,
    IntroVaeConfig,
};
use cranio_model::nets::{
    bind_params, reparameterize, Critic, CriticConfig, EncoderConfig, Generator,
    GeneratorConfig, NamedArray, VNet, VNetConfig, VaeEncoder,
};
use ndarray::{ArrayD, Axis, IxDyn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub trace: LossTrace,
}

/// Dispatches to the pipeline named by `cfg.model_kind`.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    resume: Option<Checkpoint>,
    snapshot_dir: Option<&Path>,
) -> Result<TrainOutput> {
    match cfg.model_kind {
        ModelKind::Vae => pretrain_vae(cfg, dataset, resume, snapshot_dir),
        ModelKind::WganGp => train_wgan_gp(cfg, dataset, resume, snapshot_dir),
        ModelKind::VaeWganGp => train_hybrid(cfg, dataset, resume, snapshot_dir),
        ModelKind::IntroVae => train_introvae(cfg, dataset, resume, snapshot_dir),
        ModelKind::Vnet => train_vnet(cfg, dataset, resume, snapshot_dir),
    }
}

// ---------------------------------------------------------------------------
// shared machinery
// ---------------------------------------------------------------------------

fn sample_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

fn sample_eps(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen::<f32>()).collect()
}

fn unwrap_grads(
    g: &Graph<f32>,
    ids: &[NodeId],
    grads: &[Option<NodeId>],
    names: &[NamedArray<f32>],
) -> Vec<ArrayD<f32>> {
    debug_assert_eq!(ids.len(), grads.len());
    grads
        .iter()
        .zip(names)
        .map(|(og, p)| match og {
            Some(id) => g.value(*id).clone(),
            None => panic!("loss is disconnected from parameter {}", p.name),
        })
        .collect()
}

fn make_checkpoint(
    cfg: &TrainConfig,
    nets: &[&NetState],
    epoch: usize,
    step: u64,
    rng: &ChaCha8Rng,
    trace: &LossTrace,
) -> Checkpoint {
    Checkpoint {
        model_kind: cfg.model_kind,
        config: cfg.clone(),
        epoch,
        step,
        rng: RngState::capture(rng),
        history: trace.rows.clone(),
        nets: nets.iter().map(|n| (*n).clone()).collect(),
    }
}

fn non_finite(
    cfg: &TrainConfig,
    nets: &[&NetState],
    epoch: usize,
    step: u64,
    rng: &ChaCha8Rng,
    trace: &LossTrace,
    message: String,
) -> PipelineError {
    PipelineError::NonFinite {
        epoch,
        step,
        message,
        checkpoint: Box::new(make_checkpoint(cfg, nets, epoch, step, rng, trace)),
    }
}

fn maybe_snapshot(
    dir: Option<&Path>,
    cfg: &TrainConfig,
    nets: &[&NetState],
    epoch: usize,
    step: u64,
    rng: &ChaCha8Rng,
    trace: &LossTrace,
) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    let interval = cfg.checkpoint_interval_epochs;
    if interval > 0 && (epoch + 1) % interval == 0 && epoch + 1 < cfg.epochs {
        std::fs::create_dir_all(dir)?;
        let ckpt = make_checkpoint(cfg, nets, epoch + 1, step, rng, trace);
        ckpt.save(dir.join(format!("epoch_{:04}.ckpt", epoch + 1)))?;
    }
    Ok(())
}

/// Plateau detector over epoch-mean losses (design: relative change below
/// tolerance for `patience` consecutive epochs).
struct Plateau {
    prev: Option<f64>,
    flat: usize,
}

impl Plateau {
    fn new() -> Self {
        Self {
            prev: None,
            flat: 0,
        }
    }

    /// Replays prior epoch means (for exact resume behavior).
    fn replay(trace: &LossTrace, name: &str, from_epoch: usize, upto: usize, es: &EarlyStopConfig) -> Self {
        let mut p = Plateau::new();
        for epoch in from_epoch..upto {
            let vals: Vec<f64> = trace
                .values_named(name)
                .filter(|r| r.epoch == epoch)
                .map(|r| r.value as f64)
                .collect();
            if !vals.is_empty() {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                p.update(mean, es);
            }
        }
        p
    }

    /// Returns true when training should stop.
    fn update(&mut self, mean: f64, es: &EarlyStopConfig) -> bool {
        if !es.enabled {
            return false;
        }
        let stop = if let Some(prev) = self.prev {
            let rel = (mean - prev).abs() / prev.abs().max(1e-12);
            if rel < es.rel_tol {
                self.flat += 1;
            } else {
                self.flat = 0;
            }
            self.flat >= es.patience
        } else {
            false
        };
        self.prev = Some(mean);
        stop
    }
}

fn take_net(nets: &mut Vec<NetState>, name: &str) -> Result<NetState> {
    let idx = nets
        .iter()
        .position(|n| n.name == name)
        .ok_or_else(|| PipelineError::Checkpoint(format!("checkpoint has no net {name:?}")))?;
    Ok(nets.remove(idx))
}

fn check_resume(cfg: &TrainConfig, resume: &Checkpoint) -> Result<()> {
    if resume.model_kind != cfg.model_kind {
        return Err(PipelineError::Checkpoint(format!(
            "checkpoint is for {}, config requests {}",
            resume.model_kind.name(),
            cfg.model_kind.name()
        )));
    }
    Ok(())
}

fn batch_to_dyn(b: ndarray::Array5<f32>) -> ArrayD<f32> {
    b.into_dyn()
}

/// Splits a two-channel batch into (defective skull, defect), each with a
/// single trailing channel.
fn split_channels(batch: &ArrayD<f32>) -> (ArrayD<f32>, ArrayD<f32>) {
    let input = batch
        .slice_axis(Axis(4), ndarray::Slice::from(0..1))
        .to_owned();
    let target = batch
        .slice_axis(Axis(4), ndarray::Slice::from(1..2))
        .to_owned();
    (input, target)
}

// ---------------------------------------------------------------------------
// VAE
// ---------------------------------------------------------------------------

struct VaeNets {
    enc: VaeEncoder,
    dec: Generator,
}

fn build_vae_nets(cfg: &TrainConfig) -> Result<VaeNets> {
    Ok(VaeNets {
        enc: VaeEncoder::new(EncoderConfig::new(
            cfg.resolution,
            cfg.base_channels,
            cfg.latent_dim,
        ))?,
        dec: Generator::new(GeneratorConfig::vae_decoder(
            cfg.resolution,
            cfg.base_channels,
            cfg.latent_dim,
        ))?,
    })
}

#[allow(clippy::too_many_arguments)]
fn vae_update(
    nets: &VaeNets,
    enc_state: &mut NetState,
    dec_state: &mut NetState,
    batch: &ArrayD<f32>,
    noise: &ArrayD<f32>,
    hp: &AdamHyper,
) -> Result<(f32, f32, f32)> {
    let mut g: Graph<f32> = Graph::new();
    let ep = bind_params(&mut g, &enc_state.params);
    let dp = bind_params(&mut g, &dec_state.params);
    let x = g.leaf(batch.clone());
    let post = nets.enc.forward(&mut g, &ep, x)?;
    let nz = g.leaf(noise.clone());
    let z = reparameterize(&mut g, &post, nz)?;
    let xr = nets
        .dec
        .forward(&mut g, &dp, z, true, &mut dec_state.params.buffers)?;
    let kl = kl_standard_normal(&mut g, &post);
    let rec = reconstruction_loss(&mut g, x, xr)?;
    let total = g.add(kl, rec);
    let tv = g.scalar_value(total);
    if !tv.is_finite() {
        return Err(PipelineError::Model(cranio_model::ModelError::Numeric(
            format!("vae loss {tv}"),
        )));
    }
    let all: Vec<NodeId> = ep.iter().chain(dp.iter()).cloned().collect();
    let grads = g.grad(total, &all);
    let ge = unwrap_grads(&g, &ep, &grads[..ep.len()], &enc_state.params.params);
    let gd = unwrap_grads(&g, &dp, &grads[ep.len()..], &dec_state.params.params);
    let (klv, recv) = (g.scalar_value(kl), g.scalar_value(rec));
    adam_step(&mut enc_state.params.params, &ge, &mut enc_state.adam, hp)?;
    adam_step(&mut dec_state.params.params, &gd, &mut dec_state.adam, hp)?;
    Ok((klv, recv, tv))
}

/// Minimizes `KL + reconstruction` over two-channel samples (the classic
/// VAE, and stage 1 of the hybrid).
pub fn pretrain_vae(
    cfg: &TrainConfig,
    dataset: &Dataset,
    resume: Option<Checkpoint>,
    snapshot_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let nets = build_vae_nets(cfg)?;
    let mut rng;
    let mut trace;
    let mut step;
    let start_epoch;
    let mut enc_state;
    let mut dec_state;
    match resume {
        Some(ckpt) => {
            check_resume(cfg, &ckpt)?;
            let mut taken = ckpt.nets;
            enc_state = take_net(&mut taken, "encoder")?;
            dec_state = take_net(&mut taken, "decoder")?;
            rng = ckpt.rng.restore()?;
            trace = LossTrace::from_rows(ckpt.history);
            step = ckpt.step;
            start_epoch = ckpt.epoch;
        }
        None => {
            rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let enc_seed = rng.next_u64();
            let dec_seed = rng.next_u64();
            enc_state = NetState::fresh(
                "encoder",
                ArchConfig::Encoder(nets.enc.cfg.clone()),
                enc_seed,
            )?;
            dec_state = NetState::fresh(
                "decoder",
                ArchConfig::Generator(nets.dec.cfg.clone()),
                dec_seed,
            )?;
            trace = LossTrace::new();
            step = 0;
            start_epoch = 0;
        }
    }

    let hp = AdamHyper::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
    let mut plateau = Plateau::replay(&trace, "elbo", 0, start_epoch, &cfg.early_stop);
    let mut final_epoch = start_epoch;
    'epochs: for epoch in start_epoch..cfg.epochs {
        final_epoch = epoch + 1;
        let epoch_seed = rng.next_u64();
        let mut totals = Vec::new();
        for batch in dataset.batches(cfg.batch_size, epoch_seed)? {
            let batch = batch_to_dyn(batch);
            let b = batch.shape()[0];
            let noise = sample_normal(&mut rng, &[b, cfg.latent_dim]);
            let (klv, recv, tv) =
                vae_update(&nets, &mut enc_state, &mut dec_state, &batch, &noise, &hp).map_err(
                    |e| {
                        non_finite(
                            cfg,
                            &[&enc_state, &dec_state],
                            epoch,
                            step,
                            &rng,
                            &trace,
                            e.to_string(),
                        )
                    },
                )?;
            step += 1;
            trace.push(epoch, step, "elbo", tv);
            trace.push(epoch, step, "kl", klv);
            trace.push(epoch, step, "recon", recv);
            totals.push(tv as f64);
            if step % cfg.log_interval as u64 == 0 {
                log::info!("vae epoch {epoch} step {step}: elbo {tv:.4}");
            }
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
        }
        let mean = totals.iter().sum::<f64>() / totals.len().max(1) as f64;
        log::info!("vae epoch {epoch} done: mean elbo {mean:.4}");
        maybe_snapshot(snapshot_dir, cfg, &[&enc_state, &dec_state], epoch, step, &rng, &trace)?;
        if plateau.update(mean, &cfg.early_stop) {
            log::info!("vae early stop at epoch {epoch}: loss plateau");
            break;
        }
    }
    let checkpoint = make_checkpoint(
        cfg,
        &[&enc_state, &dec_state],
        final_epoch,
        step,
        &rng,
        &trace,
    );
    Ok(TrainOutput { checkpoint, trace })
}

// ---------------------------------------------------------------------------
// WGAN-GP
// ---------------------------------------------------------------------------

struct GanNets {
    critic: Critic,
    gen: Generator,
}

fn build_gan_nets(cfg: &TrainConfig) -> Result<GanNets> {
    Ok(GanNets {
        critic: Critic::new(CriticConfig::new(cfg.resolution, cfg.base_channels))?,
        gen: Generator::new(GeneratorConfig::wgan(
            cfg.resolution,
            cfg.base_channels,
            cfg.latent_dim,
        ))?,
    })
}

fn critic_update(
    nets: &GanNets,
    critic_state: &mut NetState,
    gen_state: &mut NetState,
    real: &ArrayD<f32>,
    z: &ArrayD<f32>,
    eps: &[f32],
    cfg: &TrainConfig,
    hp: &AdamHyper,
) -> Result<(f32, f32, f32)> {
    let mut g: Graph<f32> = Graph::new();
    let gp_ids = bind_params(&mut g, &gen_state.params);
    let zn = g.leaf(z.clone());
    let fake_node = nets
        .gen
        .forward(&mut g, &gp_ids, zn, true, &mut gen_state.params.buffers)?;
    let fake = g.value(fake_node).clone();
    let cp_ids = bind_params(&mut g, &critic_state.params);
    let mut critic_fn =
        |g: &mut Graph<f32>, x: NodeId| nets.critic.forward(g, &cp_ids, x);
    let parts = critic_loss(&mut g, &mut critic_fn, real, &fake, eps, &cfg.wgan)?;
    let tv = g.scalar_value(parts.total);
    if !tv.is_finite() {
        return Err(PipelineError::Model(cranio_model::ModelError::Numeric(
            format!("critic loss {tv}"),
        )));
    }
    let grads = g.grad(parts.total, &cp_ids);
    let gc = unwrap_grads(&g, &cp_ids, &grads, &critic_state.params.params);
    let w = g.scalar_value(parts.wasserstein);
    let p = g.scalar_value(parts.penalty);
    adam_step(&mut critic_state.params.params, &gc, &mut critic_state.adam, hp)?;
    Ok((tv, w, p))
}

fn generator_update(
    nets: &GanNets,
    critic_state: &NetState,
    gen_state: &mut NetState,
    z: &ArrayD<f32>,
    hp: &AdamHyper,
) -> Result<f32> {
    let mut g: Graph<f32> = Graph::new();
    let cp_ids = bind_params(&mut g, &critic_state.params);
    let gp_ids = bind_params(&mut g, &gen_state.params);
    let zn = g.leaf(z.clone());
    let fake = nets
        .gen
        .forward(&mut g, &gp_ids, zn, true, &mut gen_state.params.buffers)?;
    let mut critic_fn =
        |g: &mut Graph<f32>, x: NodeId| nets.critic.forward(g, &cp_ids, x);
    let loss = generator_wgan_loss(&mut g, &mut critic_fn, fake)?;
    let tv = g.scalar_value(loss);
    if !tv.is_finite() {
        return Err(PipelineError::Model(cranio_model::ModelError::Numeric(
            format!("generator loss {tv}"),
        )));
    }
    let grads = g.grad(loss, &gp_ids);
    let gg = unwrap_grads(&g, &gp_ids, &grads, &gen_state.params.params);
    adam_step(&mut gen_state.params.params, &gg, &mut gen_state.adam, hp)?;
    Ok(tv)
}

/// Latent source for one adversarial cycle: the standard-normal prior, or a
/// reparameterized encoder posterior (hybrid stage 2).
enum LatentSource<'a> {
    Prior,
    Posterior { mu: &'a ArrayD<f32>, std: &'a ArrayD<f32> },
}

impl LatentSource<'_> {
    fn draw(&self, rng: &mut ChaCha8Rng, batch: usize, latent_dim: usize) -> ArrayD<f32> {
        let noise = sample_normal(rng, &[batch, latent_dim]);
        match self {
            LatentSource::Prior => noise,
            LatentSource::Posterior { mu, std } => {
                let mut z = noise;
                z.zip_mut_with(*std, |n, s| *n *= s);
                z.zip_mut_with(*mu, |n, m| *n += m);
                z
            }
        }
    }

    fn tag(&self) -> f32 {
        match self {
            LatentSource::Prior => 1.0,
            LatentSource::Posterior { .. } => 0.0,
        }
    }
}

/// One adversarial cycle on one real batch: `critic_iters_per_gen` critic
/// updates with fresh latents, then one generator update.
#[allow(clippy::too_many_arguments)]
fn adversarial_cycle(
    nets: &GanNets,
    critic_state: &mut NetState,
    gen_state: &mut NetState,
    real: &ArrayD<f32>,
    source: &LatentSource<'_>,
    cfg: &TrainConfig,
    hp: &AdamHyper,
    rng: &mut ChaCha8Rng,
    trace: &mut LossTrace,
    epoch: usize,
    step: &mut u64,
) -> Result<f64> {
    let b = real.shape()[0];
    let mut last_critic_total = 0.0f64;
    for _ in 0..cfg.wgan.critic_iters_per_gen {
        let z = source.draw(rng, b, cfg.latent_dim);
        let eps = sample_eps(rng, b);
        let (tv, w, p) = critic_update(nets, critic_state, gen_state, real, &z, &eps, cfg, hp)?;
        *step += 1;
        trace.push(epoch, *step, "critic_loss", tv);
        trace.push(epoch, *step, "wasserstein", w);
        trace.push(epoch, *step, "gp", p);
        last_critic_total = tv as f64;
    }
    let z = source.draw(rng, b, cfg.latent_dim);
    let gl = generator_update(nets, critic_state, gen_state, &z, hp)?;
    *step += 1;
    trace.push(epoch, *step, "gen_loss", gl);
    trace.push(epoch, *step, "latent_source", source.tag());
    Ok(last_critic_total)
}

/// Standard WGAN-GP training: per real batch, five critic updates then one
/// generator update, all latents drawn from the prior.
pub fn train_wgan_gp(
    cfg: &TrainConfig,
    dataset: &Dataset,
    resume: Option<Checkpoint>,
    snapshot_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let nets = build_gan_nets(cfg)?;
    let mut rng;
    let mut trace;
    let mut step;
    let start_epoch;
    let mut critic_state;
    let mut gen_state;
    match resume {
        Some(ckpt) => {
            check_resume(cfg, &ckpt)?;
            let mut taken = ckpt.nets;
            critic_state = take_net(&mut taken, "critic")?;
            gen_state = take_net(&mut taken, "generator")?;
            rng = ckpt.rng.restore()?;
            trace = LossTrace::from_rows(ckpt.history);
            step = ckpt.step;
            start_epoch = ckpt.epoch;
        }
        None => {
            rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let c_seed = rng.next_u64();
            let g_seed = rng.next_u64();
            critic_state = NetState::fresh(
                "critic",
                ArchConfig::Critic(nets.critic.cfg.clone()),
                c_seed,
            )?;
            gen_state = NetState::fresh(
                "generator",
                ArchConfig::Generator(nets.gen.cfg.clone()),
                g_seed,
            )?;
            trace = LossTrace::new();
            step = 0;
            start_epoch = 0;
        }
    }

    let hp = AdamHyper::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
    let mut plateau = Plateau::replay(&trace, "critic_loss", 0, start_epoch, &cfg.early_stop);
    let mut cycles: u64 = trace.values_named("gen_loss").count() as u64;
    let mut final_epoch = start_epoch;
    'epochs: for epoch in start_epoch..cfg.epochs {
        final_epoch = epoch + 1;
        let epoch_seed = rng.next_u64();
        let mut totals = Vec::new();
        for batch in dataset.batches(cfg.batch_size, epoch_seed)? {
            let real = batch_to_dyn(batch);
            let mean_critic = adversarial_cycle(
                &nets,
                &mut critic_state,
                &mut gen_state,
                &real,
                &LatentSource::Prior,
                cfg,
                &hp,
                &mut rng,
                &mut trace,
                epoch,
                &mut step,
            )
            .map_err(|e| {
                non_finite(
                    cfg,
                    &[&critic_state, &gen_state],
                    epoch,
                    step,
                    &rng,
                    &trace,
                    e.to_string(),
                )
            })?;
            totals.push(mean_critic);
            cycles += 1;
            if cycles % cfg.log_interval as u64 == 0 {
                log::info!("wgan epoch {epoch} cycle {cycles}: critic {mean_critic:.4}");
            }
            if cfg.max_steps.is_some_and(|m| cycles >= m) {
                break 'epochs;
            }
        }
        let mean = totals.iter().sum::<f64>() / totals.len().max(1) as f64;
        log::info!("wgan epoch {epoch} done: mean critic loss {mean:.4}");
        maybe_snapshot(snapshot_dir, cfg, &[&critic_state, &gen_state], epoch, step, &rng, &trace)?;
        if plateau.update(mean, &cfg.early_stop) {
            log::info!("wgan early stop at epoch {epoch}: loss plateau");
            break;
        }
    }
    let checkpoint = make_checkpoint(
        cfg,
        &[&critic_state, &gen_state],
        final_epoch,
        step,
        &rng,
        &trace,
    );
    Ok(TrainOutput { checkpoint, trace })
}

// ---------------------------------------------------------------------------
// three-step hybrid
// ---------------------------------------------------------------------------

fn encode_posterior(
    enc: &VaeEncoder,
    enc_state: &NetState,
    batch: &ArrayD<f32>,
) -> Result<(ArrayD<f32>, ArrayD<f32>)> {
    let mut g: Graph<f32> = Graph::new();
    let ep = bind_params(&mut g, &enc_state.params);
    let x = g.leaf(batch.clone());
    let post = enc.forward(&mut g, &ep, x)?;
    let mu = g.value(post.mu).clone();
    let std = g.value(post.log_var).mapv(|lv| (0.5 * lv).exp());
    Ok((mu, std))
}

/// The three-step pipeline: VAE pretraining, WGAN-GP fed with
/// reparameterized encoder latents (encoder frozen), then standard WGAN-GP
/// on prior latents.
pub fn train_hybrid(
    cfg: &TrainConfig,
    dataset: &Dataset,
    resume: Option<Checkpoint>,
    snapshot_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let vae_nets = build_vae_nets(cfg)?;
    let gan_nets = build_gan_nets(cfg)?;
    let stage2_start = cfg.vae_pretrain_epochs;
    let stage3_start = cfg.vae_pretrain_epochs + cfg.latent_feed_epochs;

    let mut rng;
    let mut trace;
    let mut step;
    let start_epoch;
    let mut enc_state;
    let mut dec_state;
    let mut critic_state;
    let mut gen_state;
    match resume {
        Some(ckpt) => {
            check_resume(cfg, &ckpt)?;
            let mut taken = ckpt.nets;
            enc_state = take_net(&mut taken, "encoder")?;
            dec_state = take_net(&mut taken, "decoder")?;
            critic_state = take_net(&mut taken, "critic")?;
            gen_state = take_net(&mut taken, "generator")?;
            rng = ckpt.rng.restore()?;
            trace = LossTrace::from_rows(ckpt.history);
            step = ckpt.step;
            start_epoch = ckpt.epoch;
        }
        None => {
            rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let seeds: Vec<u64> = (0..4).map(|_| rng.next_u64()).collect();
            enc_state = NetState::fresh(
                "encoder",
                ArchConfig::Encoder(vae_nets.enc.cfg.clone()),
                seeds[0],
            )?;
            dec_state = NetState::fresh(
                "decoder",
                ArchConfig::Generator(vae_nets.dec.cfg.clone()),
                seeds[1],
            )?;
            critic_state = NetState::fresh(
                "critic",
                ArchConfig::Critic(gan_nets.critic.cfg.clone()),
                seeds[2],
            )?;
            gen_state = NetState::fresh(
                "generator",
                ArchConfig::Generator(gan_nets.gen.cfg.clone()),
                seeds[3],
            )?;
            trace = LossTrace::new();
            step = 0;
            start_epoch = 0;
        }
    }

    let vae_hp = AdamHyper::new(1e-3, 0.9, 0.999);
    let gan_hp = AdamHyper::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
    let mut plateau =
        Plateau::replay(&trace, "critic_loss", stage3_start, start_epoch, &cfg.early_stop);
    let mut final_epoch = start_epoch;
    for epoch in start_epoch..cfg.epochs {
        final_epoch = epoch + 1;
        let stage = if epoch < stage2_start {
            1
        } else if epoch < stage3_start {
            2
        } else {
            3
        };
        if epoch == 0 || epoch == stage2_start || epoch == stage3_start {
            trace.push(epoch, step, "stage", stage as f32);
            log::info!("hybrid stage {stage} begins at epoch {epoch}");
        }
        let epoch_seed = rng.next_u64();
        let mut totals = Vec::new();
        for batch in dataset.batches(cfg.batch_size, epoch_seed)? {
            let real = batch_to_dyn(batch);
            let fail = |e: PipelineError,
                        states: &[&NetState],
                        rng: &ChaCha8Rng,
                        trace: &LossTrace,
                        step: u64| {
                non_finite(cfg, states, epoch, step, rng, trace, e.to_string())
            };
            match stage {
                1 => {
                    let b = real.shape()[0];
                    let noise = sample_normal(&mut rng, &[b, cfg.latent_dim]);
                    let (klv, recv, tv) = vae_update(
                        &vae_nets,
                        &mut enc_state,
                        &mut dec_state,
                        &real,
                        &noise,
                        &vae_hp,
                    )
                    .map_err(|e| {
                        fail(
                            e,
                            &[&enc_state, &dec_state, &critic_state, &gen_state],
                            &rng,
                            &trace,
                            step,
                        )
                    })?;
                    step += 1;
                    trace.push(epoch, step, "elbo", tv);
                    trace.push(epoch, step, "kl", klv);
                    trace.push(epoch, step, "recon", recv);
                }
                2 => {
                    let (mu, std) = encode_posterior(&vae_nets.enc, &enc_state, &real)?;
                    let source = LatentSource::Posterior { mu: &mu, std: &std };
                    let tv = adversarial_cycle(
                        &gan_nets,
                        &mut critic_state,
                        &mut gen_state,
                        &real,
                        &source,
                        cfg,
                        &gan_hp,
                        &mut rng,
                        &mut trace,
                        epoch,
                        &mut step,
                    )
                    .map_err(|e| {
                        fail(
                            e,
                            &[&enc_state, &dec_state, &critic_state, &gen_state],
                            &rng,
                            &trace,
                            step,
                        )
                    })?;
                    totals.push(tv);
                }
                _ => {
                    let tv = adversarial_cycle(
                        &gan_nets,
                        &mut critic_state,
                        &mut gen_state,
                        &real,
                        &LatentSource::Prior,
                        cfg,
                        &gan_hp,
                        &mut rng,
                        &mut trace,
                        epoch,
                        &mut step,
                    )
                    .map_err(|e| {
                        fail(
                            e,
                            &[&enc_state, &dec_state, &critic_state, &gen_state],
                            &rng,
                            &trace,
                            step,
                        )
                    })?;
                    totals.push(tv);
                }
            }
        }
        let states = [&enc_state, &dec_state, &critic_state, &gen_state];
        maybe_snapshot(snapshot_dir, cfg, &states, epoch, step, &rng, &trace)?;
        if stage == 3 && !totals.is_empty() {
            let mean = totals.iter().sum::<f64>() / totals.len() as f64;
            if plateau.update(mean, &cfg.early_stop) {
                log::info!("hybrid early stop at epoch {epoch}: loss plateau");
                break;
            }
        }
    }
    let checkpoint = make_checkpoint(
        cfg,
        &[&enc_state, &dec_state, &critic_state, &gen_state],
        final_epoch,
        step,
        &rng,
        &trace,
    );
    Ok(TrainOutput { checkpoint, trace })
}

// ---------------------------------------------------------------------------
// IntroVAE
// ---------------------------------------------------------------------------

struct IntroNets {
    inference: VaeEncoder,
    gen: Generator,
}

#[allow(clippy::too_many_arguments)]
fn introvae_encoder_step(
    nets: &IntroNets,
    enc_state: &mut NetState,
    gen_state: &mut NetState,
    batch: &ArrayD<f32>,
    noise: &ArrayD<f32>,
    z_prior: &ArrayD<f32>,
    cfg: &IntroVaeConfig,
    hp: &AdamHyper,
) -> Result<Vec<(&'static str, f32)>> {
    let mut g: Graph<f32> = Graph::new();
    let ep = bind_params(&mut g, &enc_state.params);
    let gp = bind_params(&mut g, &gen_state.params);
    let x = g.leaf(batch.clone());
    let post_real = nets.inference.forward(&mut g, &ep, x)?;
    let nz = g.leaf(noise.clone());
    let z = reparameterize(&mut g, &post_real, nz)?;
    let x_rec = nets
        .gen
        .forward(&mut g, &gp, z, true, &mut gen_state.params.buffers)?;
    let zp = g.leaf(z_prior.clone());
    let x_p = nets
        .gen
        .forward(&mut g, &gp, zp, true, &mut gen_state.params.buffers)?;
    // the adversarial posteriors see the generated volumes with gradients
    // stopped there (the ng(:) of the objective)
    let x_rec_d = g.detach(x_rec);
    let x_p_d = g.detach(x_p);
    let post_rec = nets.inference.forward(&mut g, &ep, x_rec_d)?;
    let post_p = nets.inference.forward(&mut g, &ep, x_p_d)?;
    let parts = introvae_encoder_loss(&mut g, &post_real, &post_rec, &post_p, x, x_rec, cfg)?;
    let tv = g.scalar_value(parts.total);
    if !tv.is_finite() {
        return Err(PipelineError::Model(cranio_model::ModelError::Numeric(
            format!("introvae encoder loss {tv}"),
        )));
    }
    let grads = g.grad(parts.total, &ep);
    let ge = unwrap_grads(&g, &ep, &grads, &enc_state.params.params);
    let out = vec![
        ("enc_loss", tv),
        ("kl_real", g.scalar_value(parts.kl_real)),
        ("enc_adv_kl_rec", g.scalar_value(parts.adv_kl_rec)),
        ("enc_adv_kl_sampled", g.scalar_value(parts.adv_kl_sampled)),
        ("hinge_rec", g.scalar_value(parts.hinge_rec)),
        ("hinge_sampled", g.scalar_value(parts.hinge_sampled)),
        ("recon", g.scalar_value(parts.recon)),
    ];
    adam_step(&mut enc_state.params.params, &ge, &mut enc_state.adam, hp)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn introvae_generator_step(
    nets: &IntroNets,
    enc_state: &NetState,
    gen_state: &mut NetState,
    batch: &ArrayD<f32>,
    noise: &ArrayD<f32>,
    z_prior: &ArrayD<f32>,
    cfg: &IntroVaeConfig,
    hp: &AdamHyper,
) -> Result<Vec<(&'static str, f32)>> {
    let mut g: Graph<f32> = Graph::new();
    let ep = bind_params(&mut g, &enc_state.params);
    let gp = bind_params(&mut g, &gen_state.params);
    let x = g.leaf(batch.clone());
    let post_real = nets.inference.forward(&mut g, &ep, x)?;
    let nz = g.leaf(noise.clone());
    let z = reparameterize(&mut g, &post_real, nz)?;
    let x_rec = nets
        .gen
        .forward(&mut g, &gp, z, true, &mut gen_state.params.buffers)?;
    let zp = g.leaf(z_prior.clone());
    let x_p = nets
        .gen
        .forward(&mut g, &gp, zp, true, &mut gen_state.params.buffers)?;
    // gradients flow through the generated volumes here
    let post_rec = nets.inference.forward(&mut g, &ep, x_rec)?;
    let post_p = nets.inference.forward(&mut g, &ep, x_p)?;
    let parts = introvae_generator_loss(&mut g, &post_rec, &post_p, x, x_rec, cfg)?;
    let tv = g.scalar_value(parts.total);
    if !tv.is_finite() {
        return Err(PipelineError::Model(cranio_model::ModelError::Numeric(
            format!("introvae generator loss {tv}"),
        )));
    }
    let grads = g.grad(parts.total, &gp);
    let gg = unwrap_grads(&g, &gp, &grads, &gen_state.params.params);
    let out = vec![
        ("gen_loss", tv),
        ("gen_adv_kl_rec", g.scalar_value(parts.adv_kl_rec)),
        ("gen_adv_kl_sampled", g.scalar_value(parts.adv_kl_sampled)),
        ("gen_recon", g.scalar_value(parts.recon)),
    ];
    adam_step(&mut gen_state.params.params, &gg, &mut gen_state.adam, hp)?;
    Ok(out)
}

/// IntroVAE: a VAE-mode warm-up (`alpha = 0`), then joint alternating
/// encoder/generator updates with margin-hinged adversarial KL terms.
pub fn train_introvae(
    cfg: &TrainConfig,
    dataset: &Dataset,
    resume: Option<Checkpoint>,
    snapshot_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let nets = IntroNets {
        inference: VaeEncoder::new(EncoderConfig::new(
            cfg.resolution,
            cfg.base_channels,
            cfg.latent_dim,
        ))?,
        gen: Generator::new(GeneratorConfig::introvae(
            cfg.resolution,
            cfg.base_channels,
            cfg.latent_dim,
        ))?,
    };
    let mut rng;
    let mut trace;
    let mut step;
    let start_epoch;
    let mut enc_state;
    let mut gen_state;
    match resume {
        Some(ckpt) => {
            check_resume(cfg, &ckpt)?;
            let mut taken = ckpt.nets;
            enc_state = take_net(&mut taken, "inference")?;
            gen_state = take_net(&mut taken, "generator")?;
            rng = ckpt.rng.restore()?;
            trace = LossTrace::from_rows(ckpt.history);
            step = ckpt.step;
            start_epoch = ckpt.epoch;
        }
        None => {
            rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let e_seed = rng.next_u64();
            let g_seed = rng.next_u64();
            enc_state = NetState::fresh(
                "inference",
                ArchConfig::Encoder(nets.inference.cfg.clone()),
                e_seed,
            )?;
            gen_state = NetState::fresh(
                "generator",
                ArchConfig::Generator(nets.gen.cfg.clone()),
                g_seed,
            )?;
            trace = LossTrace::new();
            step = 0;
            start_epoch = 0;
        }
    }

    let hp = AdamHyper::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
    let mut plateau =
        Plateau::replay(&trace, "enc_loss", cfg.intro_warmup_epochs, start_epoch, &cfg.early_stop);
    let mut final_epoch = start_epoch;
    for epoch in start_epoch..cfg.epochs {
        final_epoch = epoch + 1;
        let alpha = if epoch < cfg.intro_warmup_epochs {
            0.0
        } else {
            cfg.intro.alpha
        };
        let phase_cfg = IntroVaeConfig {
            alpha,
            ..cfg.intro
        };
        let epoch_seed = rng.next_u64();
        let mut totals = Vec::new();
        for batch in dataset.batches(cfg.batch_size, epoch_seed)? {
            let batch = batch_to_dyn(batch);
            let b = batch.shape()[0];
            let noise_e = sample_normal(&mut rng, &[b, cfg.latent_dim]);
            let zp_e = sample_normal(&mut rng, &[b, cfg.latent_dim]);
            let enc_rows = introvae_encoder_step(
                &nets,
                &mut enc_state,
                &mut gen_state,
                &batch,
                &noise_e,
                &zp_e,
                &phase_cfg,
                &hp,
            )
            .map_err(|e| {
                non_finite(cfg, &[&enc_state, &gen_state], epoch, step, &rng, &trace, e.to_string())
            })?;
            let noise_g = sample_normal(&mut rng, &[b, cfg.latent_dim]);
            let zp_g = sample_normal(&mut rng, &[b, cfg.latent_dim]);
            let gen_rows = introvae_generator_step(
                &nets,
                &enc_state,
                &mut gen_state,
                &batch,
                &noise_g,
                &zp_g,
                &phase_cfg,
                &hp,
            )
            .map_err(|e| {
                non_finite(cfg, &[&enc_state, &gen_state], epoch, step, &rng, &trace, e.to_string())
            })?;
            step += 1;
            trace.push(epoch, step, "alpha", alpha as f32);
            let mut enc_total = 0.0;
            for (name, v) in enc_rows.iter().chain(gen_rows.iter()) {
                trace.push(epoch, step, name, *v);
                if *name == "enc_loss" {
                    enc_total = *v as f64;
                }
            }
            totals.push(enc_total);
        }
        let states = [&enc_state, &gen_state];
        maybe_snapshot(snapshot_dir, cfg, &states, epoch, step, &rng, &trace)?;
        if epoch >= cfg.intro_warmup_epochs && !totals.is_empty() {
            let mean = totals.iter().sum::<f64>() / totals.len() as f64;
            if plateau.update(mean, &cfg.early_stop) {
                log::info!("introvae early stop at epoch {epoch}: loss plateau");
                break;
            }
        }
    }
    let checkpoint = make_checkpoint(
        cfg,
        &[&enc_state, &gen_state],
        final_epoch,
        step,
        &rng,
        &trace,
    );
    Ok(TrainOutput { checkpoint, trace })
}

// ---------------------------------------------------------------------------
// V-Net
// ---------------------------------------------------------------------------

/// Supervised defect segmentation: defective-skull channel in, defect
/// channel as target, Dice loss.
pub fn train_vnet(
    cfg: &TrainConfig,
    dataset: &Dataset,
    resume: Option<Checkpoint>,
    snapshot_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let vnet = VNet::new(VNetConfig {
        resolution: cfg.resolution,
        base_channels: cfg.base_channels,
        levels: cfg.vnet_levels,
    })?;
    let mut rng;
    let mut trace;
    let mut step;
    let start_epoch;
    let mut state;
    match resume {
        Some(ckpt) => {
            check_resume(cfg, &ckpt)?;
            let mut taken = ckpt.nets;
            state = take_net(&mut taken, "vnet")?;
            rng = ckpt.rng.restore()?;
            trace = LossTrace::from_rows(ckpt.history);
            step = ckpt.step;
            start_epoch = ckpt.epoch;
        }
        None => {
            rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let seed = rng.next_u64();
            state = NetState::fresh("vnet", ArchConfig::Vnet(vnet.cfg.clone()), seed)?;
            trace = LossTrace::new();
            step = 0;
            start_epoch = 0;
        }
    }

    let hp = AdamHyper::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
    let dice_cfg = DiceLossConfig::default();
    let mut plateau = Plateau::replay(&trace, "dice_loss", 0, start_epoch, &cfg.early_stop);
    let mut final_epoch = start_epoch;
    'epochs: for epoch in start_epoch..cfg.epochs {
        final_epoch = epoch + 1;
        let epoch_seed = rng.next_u64();
        let mut totals = Vec::new();
        for batch in dataset.batches(cfg.batch_size, epoch_seed)? {
            let batch = batch_to_dyn(batch);
            let (input, target) = split_channels(&batch);
            let mut g: Graph<f32> = Graph::new();
            let ids = bind_params(&mut g, &state.params);
            let x = g.leaf(input);
            let t = g.leaf(target);
            let pred = vnet.forward(&mut g, &ids, x)?;
            let loss = dice_loss(&mut g, pred, t, &dice_cfg)?;
            let tv = g.scalar_value(loss);
            if !tv.is_finite() {
                return Err(non_finite(
                    cfg,
                    &[&state],
                    epoch,
                    step,
                    &rng,
                    &trace,
                    format!("dice loss {tv}"),
                ));
            }
            let grads = g.grad(loss, &ids);
            let gv = unwrap_grads(&g, &ids, &grads, &state.params.params);
            adam_step(&mut state.params.params, &gv, &mut state.adam, &hp)?;
            step += 1;
            trace.push(epoch, step, "dice_loss", tv);
            totals.push(tv as f64);
            if step % cfg.log_interval as u64 == 0 {
                log::info!("vnet epoch {epoch} step {step}: dice {tv:.4}");
            }
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
        }
        let mean = totals.iter().sum::<f64>() / totals.len().max(1) as f64;
        log::info!("vnet epoch {epoch} done: mean dice loss {mean:.4}");
        maybe_snapshot(snapshot_dir, cfg, &[&state], epoch, step, &rng, &trace)?;
        if plateau.update(mean, &cfg.early_stop) {
            log::info!("vnet early stop at epoch {epoch}: loss plateau");
            break;
        }
    }
    let checkpoint = make_checkpoint(cfg, &[&state], final_epoch, step, &rng, &trace);
    Ok(TrainOutput { checkpoint, trace })
}

/// Encoder posterior statistics for a batch (used by hybrid stage-2 latent
/// checks and the latent-mode embedding export).
pub fn posterior_latent_stats(
    enc_cfg: &EncoderConfig,
    enc_state: &NetState,
    batch: &ArrayD<f32>,
) -> Result<(ArrayD<f32>, ArrayD<f32>)> {
    let enc = VaeEncoder::new(enc_cfg.clone())?;
    encode_posterior(&enc, enc_state, batch)
}
