//! Trainer contracts: schedule arithmetic, determinism, exact resume,
//! stage ordering, and the non-finite abort path.

use cranio_core::{build_dataset, Dataset, PhantomParams};
use cranio_pipeline::checkpoint::Checkpoint;
use cranio_pipeline::config::{ModelKind, TrainConfig};
use cranio_pipeline::train::{
    pretrain_vae, train, train_hybrid, train_introvae, train_vnet, train_wgan_gp,
};
use cranio_pipeline::PipelineError;

/// Checkpoint bytes with wall times zeroed, for run-to-run comparison
/// (wall clock is the one field allowed to differ between identical runs).
fn normalized_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut c = ckpt.clone();
    for row in &mut c.history {
        row.wall_ms = 0.0;
    }
    c.encode()
}

fn phantom_dataset(n_skulls: usize, seed: u64) -> Dataset {
    let p = PhantomParams {
        seed,
        ..PhantomParams::for_resolution(16)
    };
    build_dataset(n_skulls, &p, [1.0, 0.0, 0.0]).unwrap()
}

fn tiny_cfg(kind: ModelKind) -> TrainConfig {
    let mut cfg = TrainConfig::defaults_for(kind, 16);
    cfg.base_channels = 8;
    cfg.latent_dim = 16;
    cfg.batch_size = 5;
    cfg.epochs = 2;
    cfg.seed = 11;
    cfg.early_stop.enabled = false;
    cfg
}

#[test]
fn wgan_schedule_is_five_critic_updates_per_generator_update() {
    // 40 samples, batch 8: exactly 5 cycles = 25 critic + 5 generator updates
    let dataset = phantom_dataset(8, 1);
    assert_eq!(dataset.len(), 40);
    let mut cfg = tiny_cfg(ModelKind::WganGp);
    cfg.batch_size = 8;
    cfg.epochs = 1;
    let out = train_wgan_gp(&cfg, &dataset, None, None).unwrap();
    let critic_rows = out.trace.values_named("critic_loss").count();
    let gen_rows = out.trace.values_named("gen_loss").count();
    assert_eq!(critic_rows, 25);
    assert_eq!(gen_rows, 5);
    assert_eq!(critic_rows, 5 * gen_rows);
    // every traced value is finite
    assert!(out.trace.rows.iter().all(|r| r.value.is_finite()));
}

#[test]
fn schedule_holds_for_uneven_batch_sizes() {
    let dataset = phantom_dataset(3, 2); // 15 samples
    let mut cfg = tiny_cfg(ModelKind::WganGp);
    cfg.batch_size = 4; // 4 batches per epoch, one short
    cfg.epochs = 2;
    let out = train_wgan_gp(&cfg, &dataset, None, None).unwrap();
    let cycles = out.trace.values_named("gen_loss").count();
    assert_eq!(cycles, 8);
    assert_eq!(out.trace.values_named("critic_loss").count(), 5 * cycles);
}

#[test]
fn every_pipeline_is_deterministic_under_a_fixed_seed() {
    let dataset = phantom_dataset(2, 3); // 10 samples

    let run = |kind: ModelKind| {
        let mut cfg = tiny_cfg(kind);
        match kind {
            ModelKind::VaeWganGp => {
                cfg.vae_pretrain_epochs = 1;
                cfg.latent_feed_epochs = 1;
                cfg.epochs = 3;
            }
            ModelKind::IntroVae => {
                cfg.intro_warmup_epochs = 1;
                cfg.epochs = 2;
            }
            _ => {}
        }
        let a = train(&cfg, &dataset, None, None).unwrap();
        let b = train(&cfg, &dataset, None, None).unwrap();
        (kind, a, b)
    };

    for kind in [
        ModelKind::Vae,
        ModelKind::WganGp,
        ModelKind::VaeWganGp,
        ModelKind::IntroVae,
        ModelKind::Vnet,
    ] {
        let (kind, a, b) = run(kind);
        assert!(
            a.trace.same_values(&b.trace),
            "{} trace differs between identical runs",
            kind.name()
        );
        assert!(
            normalized_bytes(&a.checkpoint) == normalized_bytes(&b.checkpoint),
            "{} checkpoint differs between identical runs",
            kind.name()
        );
    }
}

#[test]
fn resume_from_checkpoint_matches_the_uninterrupted_run() {
    let dataset = phantom_dataset(2, 4);

    // VAE: 2 epochs then resume for 2 more must equal a straight 4-epoch run
    let mut cfg4 = tiny_cfg(ModelKind::Vae);
    cfg4.epochs = 4;
    let full = pretrain_vae(&cfg4, &dataset, None, None).unwrap();

    let mut cfg2 = cfg4.clone();
    cfg2.epochs = 2;
    let half = pretrain_vae(&cfg2, &dataset, None, None).unwrap();
    let bytes = half.checkpoint.encode();
    let restored = Checkpoint::decode(&bytes).unwrap();
    let resumed = pretrain_vae(&cfg4, &dataset, Some(restored), None).unwrap();

    assert!(
        resumed.trace.same_values(&full.trace),
        "resumed VAE trace diverged from the uninterrupted run"
    );
    assert!(normalized_bytes(&resumed.checkpoint) == normalized_bytes(&full.checkpoint));

    // the first post-resume step matches the uninterrupted epoch-2 first step
    let first_after: Vec<_> = full
        .trace
        .values_named("elbo")
        .filter(|r| r.epoch == 2)
        .take(1)
        .map(|r| r.value)
        .collect();
    let first_resumed: Vec<_> = resumed
        .trace
        .values_named("elbo")
        .filter(|r| r.epoch == 2)
        .take(1)
        .map(|r| r.value)
        .collect();
    assert_eq!(first_after, first_resumed);

    // WGAN-GP: same exactness through the adversarial path
    let mut w3 = tiny_cfg(ModelKind::WganGp);
    w3.epochs = 3;
    w3.batch_size = 5;
    let full = train_wgan_gp(&w3, &dataset, None, None).unwrap();
    let mut w1 = w3.clone();
    w1.epochs = 1;
    let part = train_wgan_gp(&w1, &dataset, None, None).unwrap();
    let resumed = train_wgan_gp(&w3, &dataset, Some(part.checkpoint), None).unwrap();
    assert!(resumed.trace.same_values(&full.trace));
    assert!(normalized_bytes(&resumed.checkpoint) == normalized_bytes(&full.checkpoint));
}

#[test]
fn hybrid_stages_are_ordered_and_latent_sources_respect_them() {
    let dataset = phantom_dataset(2, 5);
    let mut cfg = tiny_cfg(ModelKind::VaeWganGp);
    cfg.vae_pretrain_epochs = 2;
    cfg.latent_feed_epochs = 2;
    cfg.epochs = 6;
    let out = train_hybrid(&cfg, &dataset, None, None).unwrap();

    let stages: Vec<(usize, f32)> = out
        .trace
        .values_named("stage")
        .map(|r| (r.epoch, r.value))
        .collect();
    assert_eq!(stages, vec![(0, 1.0), (2, 2.0), (4, 3.0)]);

    // stage 1 runs the VAE objective only
    assert!(out
        .trace
        .values_named("elbo")
        .all(|r| r.epoch < cfg.vae_pretrain_epochs));
    // encoder-derived latents exactly during stage 2, prior afterwards
    for r in out.trace.values_named("latent_source") {
        let stage3 = cfg.vae_pretrain_epochs + cfg.latent_feed_epochs;
        if r.epoch < stage3 {
            assert_eq!(r.value, 0.0, "prior latent before stage 3 at epoch {}", r.epoch);
        } else {
            assert_eq!(r.value, 1.0, "encoder latent in stage 3 at epoch {}", r.epoch);
        }
    }
    // all four nets land in the checkpoint
    for name in ["encoder", "decoder", "critic", "generator"] {
        assert!(out.checkpoint.find_net(name).is_some(), "missing {name}");
    }
}

#[test]
fn hybrid_stage2_latents_track_the_encoder_posterior() {
    // with a freshly initialized encoder the posterior means are small but
    // specific; the drawn latents must center on them within the tolerance
    let dataset = phantom_dataset(2, 6);
    let mut cfg = tiny_cfg(ModelKind::VaeWganGp);
    cfg.vae_pretrain_epochs = 1;
    cfg.latent_feed_epochs = 1;
    cfg.epochs = 3;
    let out = train_hybrid(&cfg, &dataset, None, None).unwrap();
    let enc = out.checkpoint.find_net("encoder").unwrap();
    let batch = dataset.batches(cfg.batch_size, 0).unwrap().next().unwrap();
    let enc_cfg = match &enc.arch {
        cranio_pipeline::checkpoint::ArchConfig::Encoder(c) => c.clone(),
        other => panic!("unexpected arch {other:?}"),
    };
    let (mu, std) = cranio_pipeline::train::posterior_latent_stats(&enc_cfg, enc, &batch.into_dyn())
        .unwrap();
    // draw many reparameterized latents and compare the empirical mean
    let mut acc = ndarray::ArrayD::<f32>::zeros(mu.raw_dim());
    let draws = 200;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    for _ in 0..draws {
        let mut z = mu.clone();
        use rand::Rng;
        z.zip_mut_with(&std, |m, s| {
            let n: f32 = rng.sample(rand_distr::StandardNormal);
            *m += s * n;
        });
        acc += &z;
    }
    acc.mapv_inplace(|v| v / draws as f32);
    for (a, m) in acc.iter().zip(mu.iter()) {
        assert!((a - m).abs() < 0.5, "latent mean {a} strays from posterior mean {m}");
    }
}

#[test]
fn introvae_alpha_phases_and_hinge_identity() {
    let dataset = phantom_dataset(2, 7);
    let mut cfg = tiny_cfg(ModelKind::IntroVae);
    cfg.intro_warmup_epochs = 1;
    cfg.epochs = 3;
    let out = train_introvae(&cfg, &dataset, None, None).unwrap();

    for r in out.trace.values_named("alpha") {
        if r.epoch < cfg.intro_warmup_epochs {
            assert_eq!(r.value, 0.0);
        } else {
            assert!((r.value - 0.25).abs() < 1e-7);
        }
    }
    // hinge is exactly zero whenever the logged adversarial KL is >= m
    let m = cfg.intro.margin as f32;
    let kls: Vec<f32> = out.trace.values_named("enc_adv_kl_rec").map(|r| r.value).collect();
    let hinges: Vec<f32> = out.trace.values_named("hinge_rec").map(|r| r.value).collect();
    assert_eq!(kls.len(), hinges.len());
    let mut saturated = 0;
    for (kl, hinge) in kls.iter().zip(&hinges) {
        if *kl >= m {
            assert_eq!(*hinge, 0.0, "hinge {hinge} with KL {kl} >= m");
            saturated += 1;
        } else {
            assert!((hinge - (m - kl)).abs() < 1e-4, "hinge {hinge} vs m - KL {}", m - kl);
        }
    }
    // warm-up epochs keep alpha at zero but still log the adversarial KLs
    assert!(saturated < kls.len(), "expected at least one active hinge");
    assert!(out.trace.rows.iter().all(|r| r.value.is_finite()));
}

#[test]
fn vnet_overfits_two_samples_and_stays_in_unit_range() {
    let dataset = phantom_dataset(1, 8); // 5 samples
    let two = dataset.subsample(2, 0).unwrap();
    let mut cfg = tiny_cfg(ModelKind::Vnet);
    cfg.base_channels = 8;
    cfg.batch_size = 2;
    cfg.epochs = 200;
    cfg.max_steps = Some(200);
    cfg.learning_rate = 2e-3;
    let out = train_vnet(&cfg, &two, None, None).unwrap();
    let last = out.trace.values_named("dice_loss").last().unwrap().value;
    assert!(last < 0.1, "final training dice loss {last}");

    // predictions from the trained net are proper probabilities
    let h = cranio_pipeline::evaluation::load_vnet(&out.checkpoint).unwrap();
    let inputs: Vec<&cranio_core::VoxelGrid> =
        two.samples.iter().map(|s| &s.sample.defective_skull).collect();
    let preds = cranio_pipeline::evaluation::vnet_predict(&h, &inputs, 2).unwrap();
    for p in &preds {
        assert!(p.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn poisoned_checkpoint_aborts_with_state_attached() {
    let dataset = phantom_dataset(2, 9);
    let mut cfg = tiny_cfg(ModelKind::Vae);
    cfg.epochs = 1;
    let out = pretrain_vae(&cfg, &dataset, None, None).unwrap();
    let mut ckpt = out.checkpoint;
    // poison one encoder weight; the next forward pass goes non-finite
    ckpt.nets[0].params.params[0].array.fill(f32::NAN);
    cfg.epochs = 2;
    match pretrain_vae(&cfg, &dataset, Some(ckpt), None) {
        Err(PipelineError::NonFinite { checkpoint, epoch, .. }) => {
            assert_eq!(epoch, 1);
            assert!(checkpoint.find_net("encoder").is_some());
        }
        Err(other) => panic!("expected NonFinite, got {other:?}"),
        Ok(_) => panic!("expected NonFinite, training succeeded"),
    }
}

#[test]
fn vae_loss_decreases_over_a_short_run() {
    let dataset = phantom_dataset(4, 10); // 20 samples
    let mut cfg = tiny_cfg(ModelKind::Vae);
    cfg.epochs = 5;
    cfg.batch_size = 8;
    let out = pretrain_vae(&cfg, &dataset, None, None).unwrap();
    let epoch_mean = |e: usize| {
        let vals: Vec<f64> = out
            .trace
            .values_named("elbo")
            .filter(|r| r.epoch == e)
            .map(|r| r.value as f64)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    assert!(
        epoch_mean(4) < epoch_mean(0),
        "VAE loss did not decrease: {} -> {}",
        epoch_mean(0),
        epoch_mean(4)
    );
}

#[test]
fn snapshots_are_written_at_the_configured_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = phantom_dataset(2, 12);
    let mut cfg = tiny_cfg(ModelKind::Vae);
    cfg.epochs = 4;
    cfg.checkpoint_interval_epochs = 2;
    pretrain_vae(&cfg, &dataset, None, Some(dir.path())).unwrap();
    assert!(dir.path().join("epoch_0002.ckpt").exists());
    assert!(!dir.path().join("epoch_0004.ckpt").exists(), "final epoch is not snapshotted");
    let snap = Checkpoint::load(dir.path().join("epoch_0002.ckpt")).unwrap();
    assert_eq!(snap.epoch, 2);
}
