//! `cranio-synth`: phantom datasets, generative training, synthesis,
//! segmentation evaluation, embeddings and latent interpolation behind one
//! declarative JSON config.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

mod config;

use clap::{Parser, Subcommand};
use config::{EmbedMode, RunConfig};
use cranio_core::{derive_seed, Dataset, Split};
use cranio_pipeline::checkpoint::Checkpoint;
use cranio_pipeline::config::ModelKind;
use cranio_pipeline::evaluation::{
    build_embedding_matrix, export_embedding, export_report, project_pca_2d, run_table_experiment,
    FeatureMode, TableExperimentConfig,
};
use cranio_pipeline::synthesis::{interpolate_latent, sample_latents, synthesize_dataset};
use cranio_pipeline::train::train;
use cranio_pipeline::PipelineError;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "cranio-synth",
    about = "Volumetric skull synthesis: phantoms, generative training, evaluation",
    version
)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed override (reproducible runs).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (1 = deterministic single-threaded mode; results are
    /// identical for any value).
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Output root; falls back to $CRANIO_SYNTH_OUT, then ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build and write a phantom skull dataset.
    Phantom {
        #[arg(long)]
        n_skulls: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Train the pipeline named by model_kind.
    Train {
        /// vae | wgan_gp | vae_wgan_gp | introvae | vnet
        #[arg(long)]
        model_kind: Option<String>,
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample a trained generator into a synthetic dataset.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train V-Nets over the (model x size) grid and export Dice tables.
    Eval {},
    /// Export embedding matrices and a 2-D PCA projection.
    Embed {
        /// flatten_downsampled | encoder_latent
        #[arg(long)]
        mode: Option<String>,
    },
    /// Interpolate between two latent codes and write the decoded steps.
    Interp {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

enum CliError {
    Usage(String),
    Runtime(String),
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Config-shaped pipeline failures map to exit 2, everything else to 1.
fn classify(e: PipelineError) -> CliError {
    match &e {
        PipelineError::Config(_) | PipelineError::InvalidArgument(_) => usage(e.to_string()),
        _ => runtime(e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.workers == 0 {
        return Err(usage("--workers must be >= 1"));
    }
    if cli.workers > 1 {
        log::info!("kernels are single-threaded; results are identical for any --workers value");
    }
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(usage)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os("CRANIO_SYNTH_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));

    match &cli.cmd {
        Cmd::Phantom {
            n_skulls,
            resolution,
        } => cmd_phantom(&cfg, &out, seed, *n_skulls, *resolution),
        Cmd::Train {
            model_kind,
            data,
            epochs,
            resume,
        } => cmd_train(&cli, &cfg, &out, seed, model_kind, data, *epochs, resume),
        Cmd::Generate { checkpoint, count } => {
            cmd_generate(&cli, &cfg, &out, seed, checkpoint, *count)
        }
        Cmd::Eval {} => cmd_eval(&cfg, &out),
        Cmd::Embed { mode } => cmd_embed(&cfg, &out, mode),
        Cmd::Interp { checkpoint, steps } => cmd_interp(&cli, &cfg, &out, seed, checkpoint, *steps),
    }
}

fn cmd_phantom(
    cfg: &RunConfig,
    out: &Path,
    seed: u64,
    n_skulls: Option<usize>,
    resolution: Option<usize>,
) -> Result<(), CliError> {
    let mut section = cfg.phantom.clone();
    if let Some(n) = n_skulls {
        section.n_skulls = n;
    }
    if let Some(r) = resolution {
        section.resolution = r;
    }
    let params = section.resolved_params(seed);
    params.validate().map_err(|e| usage(e.to_string()))?;
    let dataset = cranio_core::build_dataset(section.n_skulls, &params, section.fractions)
        .map_err(|e| match e {
            cranio_core::CoreError::InvalidArgument(_) | cranio_core::CoreError::Parameter(_) => {
                usage(e.to_string())
            }
            other => runtime(other),
        })?;
    let dir = section.dir.clone().unwrap_or_else(|| out.join("phantom"));
    dataset.save_dir(&dir).map_err(runtime)?;
    for split in [Split::Train, Split::Validation, Split::Test] {
        let n = dataset.filter_split(split).len();
        println!("{}: {n} samples", split.name());
    }
    println!("wrote {} samples to {}", dataset.len(), dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    _cli: &Cli,
    cfg: &RunConfig,
    out: &Path,
    seed: u64,
    model_kind: &Option<String>,
    data: &Option<PathBuf>,
    epochs: Option<usize>,
    resume: &Option<PathBuf>,
) -> Result<(), CliError> {
    let section = &cfg.train;
    let mut tc = section.resolved_config();
    if let Some(kind) = model_kind {
        tc.model_kind = ModelKind::from_name(kind)
            .ok_or_else(|| usage(format!("unknown model_kind {kind:?}")))?;
    }
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    tc.seed = seed;
    tc.validate().map_err(classify)?;

    let data_dir = data
        .clone()
        .or_else(|| section.data.clone())
        .ok_or_else(|| usage("missing train.data (dataset directory)"))?;
    if !data_dir.is_dir() {
        return Err(usage(format!("train.data {} is not a directory", data_dir.display())));
    }
    let resume_ckpt = match resume {
        Some(path) => {
            if !path.is_file() {
                return Err(usage(format!("resume checkpoint {} not found", path.display())));
            }
            Some(Checkpoint::load(path).map_err(runtime)?)
        }
        None => None,
    };

    let dataset = Dataset::load_dir(&data_dir).map_err(runtime)?;
    let train_split = dataset.filter_split(Split::Train);
    if train_split.is_empty() {
        return Err(usage("dataset has no train split"));
    }
    let dir = section
        .dir
        .clone()
        .unwrap_or_else(|| out.join(format!("train_{}", tc.model_kind.name())));
    std::fs::create_dir_all(&dir).map_err(runtime)?;

    log::info!(
        "training {} on {} samples for {} epochs",
        tc.model_kind.name(),
        train_split.len(),
        tc.epochs
    );
    match train(&tc, &train_split, resume_ckpt, Some(&dir)) {
        Ok(output) => {
            let ckpt_path = dir.join("checkpoint.ckpt");
            output.checkpoint.save(&ckpt_path).map_err(runtime)?;
            output.trace.write_csv(dir.join("loss.csv")).map_err(runtime)?;
            println!(
                "trained {} for {} epochs; checkpoint at {}",
                tc.model_kind.name(),
                output.checkpoint.epoch,
                ckpt_path.display()
            );
            Ok(())
        }
        Err(PipelineError::NonFinite {
            epoch,
            step,
            message,
            checkpoint,
        }) => {
            let path = dir.join("failure.ckpt");
            checkpoint.save(&path).map_err(runtime)?;
            Err(runtime(format!(
                "training aborted at epoch {epoch} step {step} ({message}); state saved to {}",
                path.display()
            )))
        }
        Err(e) => Err(classify(e)),
    }
}

fn cmd_generate(
    _cli: &Cli,
    cfg: &RunConfig,
    out: &Path,
    seed: u64,
    checkpoint: &Option<PathBuf>,
    count: Option<usize>,
) -> Result<(), CliError> {
    let section = &cfg.generate;
    let ckpt_path = checkpoint
        .clone()
        .or_else(|| section.checkpoint.clone())
        .ok_or_else(|| usage("missing generate.checkpoint"))?;
    if !ckpt_path.is_file() {
        return Err(usage(format!("checkpoint {} not found", ckpt_path.display())));
    }
    let mut synth = section.synthesis.clone();
    if let Some(c) = count {
        synth.count = c;
    }
    if synth.count == 0 {
        return Err(usage("generate count must be >= 1"));
    }
    synth.latent_seed = derive_seed(seed, 0x9e, synth.latent_seed);
    let ckpt = Checkpoint::load(&ckpt_path).map_err(runtime)?;
    let dataset = synthesize_dataset(&ckpt, &synth).map_err(classify)?;
    let dir = section.dir.clone().unwrap_or_else(|| out.join("synthetic"));
    dataset.save_dir(&dir).map_err(runtime)?;
    let info = dataset.generator.as_ref().expect("synthetic manifest");
    println!(
        "emitted {} samples ({} discarded) to {}",
        dataset.len(),
        info.discarded,
        dir.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let section = &cfg.eval;
    if section.models.is_empty() {
        return Err(usage("eval.models is empty"));
    }
    if section.sizes.is_empty() {
        return Err(usage("eval.sizes is empty"));
    }
    let train_dir = section
        .train_data
        .clone()
        .ok_or_else(|| usage("missing eval.train_data"))?;
    let test_dir = section
        .test_data
        .clone()
        .ok_or_else(|| usage("missing eval.test_data"))?;
    for d in [&train_dir, &test_dir] {
        if !d.is_dir() {
            return Err(usage(format!("{} is not a directory", d.display())));
        }
    }
    let mut checkpoints = Vec::new();
    for m in &section.models {
        if !m.checkpoint.is_file() {
            return Err(usage(format!(
                "checkpoint {} for model {} not found",
                m.checkpoint.display(),
                m.name
            )));
        }
        checkpoints.push((m.name.clone(), Checkpoint::load(&m.checkpoint).map_err(runtime)?));
    }
    let real_train = Dataset::load_dir(&train_dir).map_err(runtime)?;
    let real_test = Dataset::load_dir(&test_dir).map_err(runtime)?;

    let max_size = *section.sizes.iter().max().unwrap();
    let mut synthesis = section.synthesis.clone().unwrap_or_default();
    if synthesis.count < max_size {
        synthesis.count = max_size;
    }
    let vnet = section.vnet.clone().unwrap_or_else(|| {
        cranio_pipeline::config::TrainConfig::defaults_for(ModelKind::Vnet, section.eval_resolution)
    });
    let table_cfg = TableExperimentConfig {
        subset_sizes: section.sizes.clone(),
        seeds: section.seeds.clone(),
        vnet,
        synthesis,
        eval_resolution: section.eval_resolution,
        eval_case_cap: section.eval_case_cap,
        include_baseline: section.include_baseline,
    };
    let refs: Vec<(String, &Checkpoint)> =
        checkpoints.iter().map(|(n, c)| (n.clone(), c)).collect();
    let reports =
        run_table_experiment(&refs, &real_train, &real_test, &table_cfg).map_err(classify)?;
    let dir = section.dir.clone().unwrap_or_else(|| out.join("eval"));
    export_report(&reports, &dir).map_err(runtime)?;
    let table = std::fs::read_to_string(dir.join("table.txt")).map_err(runtime)?;
    println!("{table}");
    println!("reports written to {}", dir.display());
    Ok(())
}

fn cmd_embed(cfg: &RunConfig, out: &Path, mode: &Option<String>) -> Result<(), CliError> {
    let section = &cfg.embed;
    if section.sources.is_empty() {
        return Err(usage("embed.sources is empty"));
    }
    let mode = match mode.as_deref() {
        None => section.mode,
        Some("flatten_downsampled") => EmbedMode::FlattenDownsampled,
        Some("encoder_latent") => EmbedMode::EncoderLatent,
        Some(other) => return Err(usage(format!("unknown embed mode {other:?}"))),
    };
    let mut datasets = Vec::new();
    for s in &section.sources {
        if !s.dir.is_dir() {
            return Err(usage(format!("{} is not a directory", s.dir.display())));
        }
        datasets.push((s.label.clone(), Dataset::load_dir(&s.dir).map_err(runtime)?));
    }
    let refs: Vec<(&str, &Dataset)> = datasets.iter().map(|(l, d)| (l.as_str(), d)).collect();

    let ckpt;
    let feature_mode = match mode {
        EmbedMode::FlattenDownsampled => FeatureMode::FlattenDownsampled { side: section.side },
        EmbedMode::EncoderLatent => {
            let path = section
                .checkpoint
                .clone()
                .ok_or_else(|| usage("embed.checkpoint required for encoder_latent mode"))?;
            if !path.is_file() {
                return Err(usage(format!("checkpoint {} not found", path.display())));
            }
            ckpt = Checkpoint::load(&path).map_err(runtime)?;
            FeatureMode::EncoderLatent { checkpoint: &ckpt }
        }
    };
    let matrix = build_embedding_matrix(&refs, &feature_mode).map_err(classify)?;
    let projection = project_pca_2d(&matrix).map_err(runtime)?;
    let dir = section.dir.clone().unwrap_or_else(|| out.join("embed"));
    export_embedding(&matrix, Some(&projection), &dir).map_err(runtime)?;
    println!(
        "embedded {} samples into {} features; explained variance {:.3} + {:.3}; written to {}",
        matrix.data.nrows(),
        matrix.data.ncols(),
        projection.explained[0],
        projection.explained[1],
        dir.display()
    );
    Ok(())
}

fn cmd_interp(
    _cli: &Cli,
    cfg: &RunConfig,
    out: &Path,
    seed: u64,
    checkpoint: &Option<PathBuf>,
    steps: Option<usize>,
) -> Result<(), CliError> {
    let section = &cfg.interp;
    let ckpt_path = checkpoint
        .clone()
        .or_else(|| section.checkpoint.clone())
        .ok_or_else(|| usage("missing interp.checkpoint"))?;
    if !ckpt_path.is_file() {
        return Err(usage(format!("checkpoint {} not found", ckpt_path.display())));
    }
    let steps = steps.unwrap_or(section.steps);
    if steps < 2 {
        return Err(usage(format!("steps {steps} must be >= 2")));
    }
    let ckpt = Checkpoint::load(&ckpt_path).map_err(runtime)?;
    let handle = cranio_pipeline::synthesis::load_generator(&ckpt).map_err(classify)?;
    let latent_dim = handle.net.cfg.latent_dim;
    let za = sample_latents(1, latent_dim, derive_seed(seed, 0xa0, section.latent_a))
        .map_err(classify)?;
    let zb = sample_latents(1, latent_dim, derive_seed(seed, 0xb0, section.latent_b))
        .map_err(classify)?;
    let z1: Vec<f32> = za.iter().cloned().collect();
    let z2: Vec<f32> = zb.iter().cloned().collect();
    let samples =
        interpolate_latent(&ckpt, &z1, &z2, steps, &section.synthesis).map_err(classify)?;
    let dir = section.dir.clone().unwrap_or_else(|| out.join("interp"));
    std::fs::create_dir_all(&dir).map_err(runtime)?;
    for (i, s) in samples.iter().enumerate() {
        cranio_core::write_vxg(
            &s.defective_skull,
            dir.join(format!("interp_{i:03}_defective.vxg")),
        )
        .map_err(runtime)?;
        cranio_core::write_vxg(&s.defect, dir.join(format!("interp_{i:03}_defect.vxg")))
            .map_err(runtime)?;
    }
    println!("wrote {} interpolation steps to {}", samples.len(), dir.display());
    Ok(())
}
