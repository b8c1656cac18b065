// Scratch calibration runs for the acceptance suite budgets (not shipped).
use cranio_core::{binarize, build_dataset, dice_coefficient, Dataset, PhantomParams, RealVolume, Split};
use cranio_pipeline::config::{ModelKind, TrainConfig};
use cranio_pipeline::synthesis::{generate_raw, load_generator, sample_latents, synthesize_dataset, SynthesisConfig};
use cranio_pipeline::train::{pretrain_vae, train_wgan_gp};
use cranio_pipeline::checkpoint::Checkpoint;
use ndarray::Axis;
use std::time::Instant;

fn recon_dice(ckpt: &Checkpoint, dataset: &Dataset) -> f64 {
    use cranio_autodiff::Graph;
    use cranio_model::nets::{bind_params, VaeEncoder, Generator};
    use cranio_pipeline::checkpoint::BuiltNet;
    let enc_state = ckpt.find_net("encoder").unwrap();
    let dec_state = ckpt.find_net("decoder").unwrap();
    let BuiltNet::Encoder(enc) = enc_state.arch.build().unwrap() else { panic!() };
    let BuiltNet::Generator(dec) = dec_state.arch.build().unwrap() else { panic!() };
    let mut dec_state = dec_state.clone();
    let res = enc.cfg.resolution;
    let mut dices = Vec::new();
    for chunk in dataset.samples.chunks(8) {
        let mut batch = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[chunk.len(), res, res, res, 2]));
        for (b, s) in chunk.iter().enumerate() {
            batch.index_axis_mut(Axis(0), b).assign(&cranio_core::dataset::sample_to_array(&s.sample));
        }
        let mut g: Graph<f32> = Graph::new();
        let ep = bind_params(&mut g, &enc_state.params);
        let dp = bind_params(&mut g, &dec_state.params);
        let x = g.leaf(batch);
        let post = enc.forward(&mut g, &ep, x).unwrap();
        let mu = post.mu; // posterior mean reconstruction
        let xr = dec.forward(&mut g, &dp, mu, false, &mut dec_state.params.buffers).unwrap();
        let v = g.value(xr);
        for (b, s) in chunk.iter().enumerate() {
            for (ch, target) in [(0, &s.sample.defective_skull), (1, &s.sample.defect)] {
                let mut data = Vec::with_capacity(res*res*res);
                for z in 0..res { for y in 0..res { for xx in 0..res {
                    data.push(v[[b, z, y, xx, ch]]);
                }}}
                let rv = RealVolume::from_raw([res, res, res], data).unwrap();
                let bin = binarize(&rv, 0.5).unwrap();
                dices.push(dice_coefficient(&bin, target).unwrap());
            }
        }
    }
    dices.iter().sum::<f64>() / dices.len() as f64
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();

    if which == "c7" {
        // criterion 7 feasibility: VAE at 16^3, 20 skulls, 50 epochs, 3 seeds
        for seed in 0..3u64 {
            let p = PhantomParams { seed: 100 + seed, ..PhantomParams::for_resolution(16) };
            let data = build_dataset(20, &p, [1.0, 0.0, 0.0]).unwrap();
            let mut cfg = TrainConfig::defaults_for(ModelKind::Vae, 16);
            cfg.epochs = 50;
            cfg.seed = seed;
            cfg.early_stop.enabled = false;
            let t0 = Instant::now();
            let out = pretrain_vae(&cfg, &data, None, None).unwrap();
            let d = recon_dice(&out.checkpoint, &data);
            println!("C7 seed {seed}: recon dice {d:.4} ({:.0}s)", t0.elapsed().as_secs_f64());
        }
    }

    if which == "c8" {
        // criterion 8 pilot: WGAN-GP at 32^3 on 80 skulls, snapshot quality probes
        let p = PhantomParams { seed: 500, ..PhantomParams::for_resolution(32) };
        let train_data = build_dataset(80, &p, [1.0, 0.0, 0.0]).unwrap();
        println!("C8 pilot: {} train samples", train_data.len());
        let mut cfg = TrainConfig::defaults_for(ModelKind::WganGp, 32);
        cfg.base_channels = 8;
        cfg.epochs = 40;
        cfg.seed = 0;
        cfg.early_stop.enabled = false;
        cfg.checkpoint_interval_epochs = 5;
        let t0 = Instant::now();
        let out = train_wgan_gp(&cfg, &train_data, None, Some(std::path::Path::new("/tmp/c8_snapshots"))).unwrap();
        println!("C8 trained 40 epochs in {:.0}s", t0.elapsed().as_secs_f64());
        out.checkpoint.save("/tmp/c8_snapshots/final.ckpt").unwrap();
        out.trace.write_csv("/tmp/c8_snapshots/loss.csv").unwrap();
        // probe each snapshot: discard rate + foreground stats
        let mut paths: Vec<_> = std::fs::read_dir("/tmp/c8_snapshots").unwrap()
            .map(|e| e.unwrap().path()).filter(|p| p.extension().map_or(false, |e| e == "ckpt")).collect();
        paths.sort();
        for path in paths {
            let ckpt = Checkpoint::load(&path).unwrap();
            let scfg = SynthesisConfig { count: 32, latent_seed: 7, ..SynthesisConfig::default() };
            match synthesize_dataset(&ckpt, &scfg) {
                Ok(ds) => {
                    let info = ds.generator.clone().unwrap();
                    let mean_skull: f64 = ds.samples.iter().map(|s| s.sample.defective_skull.count_foreground() as f64).sum::<f64>() / ds.len() as f64;
                    let mean_defect: f64 = ds.samples.iter().map(|s| s.sample.defect.count_foreground() as f64).sum::<f64>() / ds.len() as f64;
                    println!("{}: ok discard {} skull_vox {:.0} defect_vox {:.0}", path.display(), info.discarded, mean_skull, mean_defect);
                }
                Err(e) => println!("{}: {e}", path.display()),
            }
        }
        // reference stats from real data
        let ms: f64 = train_data.samples.iter().take(32).map(|s| s.sample.defective_skull.count_foreground() as f64).sum::<f64>() / 32.0;
        let md: f64 = train_data.samples.iter().take(32).map(|s| s.sample.defect.count_foreground() as f64).sum::<f64>() / 32.0;
        println!("real: skull_vox {ms:.0} defect_vox {md:.0}");
        // raw output range from the final generator
        let mut h = load_generator(&Checkpoint::load("/tmp/c8_snapshots/final.ckpt").unwrap()).unwrap();
        let z = sample_latents(4, 200, 1).unwrap();
        for r in generate_raw(&mut h, &z).unwrap().iter().take(2) {
            let smax = r.skull.values().iter().cloned().fold(0.0f32, f32::max);
            let smean = r.skull.values().iter().sum::<f32>() / r.skull.values().len() as f32;
            println!("raw skull: max {smax:.3} mean {smean:.3}");
        }
    }
}
