//! Segmentation evaluation, the Dice-table experiment, and embedding
//! exports with a built-in 2-D PCA projection.

use crate::checkpoint::{BuiltNet, Checkpoint, NetState};
use crate::config::TrainConfig;
use crate::synthesis::{synthesize_dataset, SynthesisConfig};
use crate::train::train_vnet;
use crate::{PipelineError, Result};
use cranio_autodiff::Graph;
use cranio_core::{
    binarize, derive_seed, dice_coefficient, resample, Dataset, RealVolume, VoxelGrid,
};
use cranio_model::nets::{bind_params, VNet};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;

// ---------------------------------------------------------------------------
// V-Net inference and per-case Dice
// ---------------------------------------------------------------------------

pub struct VnetHandle {
    pub net: VNet,
    pub state: NetState,
}

pub fn load_vnet(ckpt: &Checkpoint) -> Result<VnetHandle> {
    let state = ckpt
        .find_net("vnet")
        .ok_or_else(|| PipelineError::Checkpoint("checkpoint has no v-net".into()))?
        .clone();
    let BuiltNet::Vnet(net) = state.arch.build()? else {
        return Err(PipelineError::Checkpoint("net \"vnet\" is not a v-net".into()));
    };
    Ok(VnetHandle { net, state })
}

/// Batched inference: defective skulls in, per-voxel defect probability out.
pub fn vnet_predict(h: &VnetHandle, inputs: &[&VoxelGrid], batch: usize) -> Result<Vec<RealVolume>> {
    let res = h.net.cfg.resolution;
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch.max(1)) {
        let mut arr = ArrayD::<f32>::zeros(IxDyn(&[chunk.len(), res, res, res, 1]));
        for (b, grid) in chunk.iter().enumerate() {
            if grid.dims() != [res, res, res] {
                return Err(PipelineError::Config(format!(
                    "v-net expects {res}^3 inputs, dataset sample has {:?}",
                    grid.dims()
                )));
            }
            for z in 0..res {
                for y in 0..res {
                    for x in 0..res {
                        arr[[b, z, y, x, 0]] = grid.get(z, y, x) as u8 as f32;
                    }
                }
            }
        }
        let mut g: Graph<f32> = Graph::new();
        let params = bind_params(&mut g, &h.state.params);
        let xn = g.leaf(arr);
        let pred = h.net.forward(&mut g, &params, xn)?;
        let v = g.value(pred);
        for b in 0..chunk.len() {
            let mut data = Vec::with_capacity(res * res * res);
            for z in 0..res {
                for y in 0..res {
                    for x in 0..res {
                        data.push(v[[b, z, y, x, 0]]);
                    }
                }
            }
            out.push(RealVolume::from_raw([res, res, res], data)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct SegEvalOptions {
    /// Predictions and ground truth are upsampled to this resolution before
    /// the Dice computation.
    pub eval_resolution: usize,
    pub batch: usize,
    /// Optional `(cap, seed)` limit on evaluated cases.
    pub case_cap: Option<(usize, u64)>,
}

impl Default for SegEvalOptions {
    fn default() -> Self {
        Self {
            eval_resolution: 32,
            batch: 8,
            case_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    pub dsc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub split: String,
    pub cases: Vec<CaseScore>,
    pub mean: f64,
    pub std: f64,
}

impl SplitScores {
    pub fn from_cases(split: &str, cases: Vec<CaseScore>) -> Self {
        let n = cases.len().max(1) as f64;
        let mean = cases.iter().map(|c| c.dsc).sum::<f64>() / n;
        let var = cases.iter().map(|c| (c.dsc - mean).powi(2)).sum::<f64>() / n;
        Self {
            split: split.to_string(),
            cases,
            mean,
            std: var.sqrt(),
        }
    }
}

/// Per-case Dice grouped by split, in the shape of the paper's table rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub model: String,
    pub train_size: usize,
    pub groups: Vec<SplitScores>,
}

impl SegReport {
    pub fn group(&self, split: &str) -> Option<&SplitScores> {
        self.groups.iter().find(|g| g.split == split)
    }
}

/// Per-case DSC of a V-Net on one dataset: predict, binarize at 0.5,
/// upsample prediction and truth to the evaluation resolution, then Dice.
pub fn evaluate_cases(
    h: &VnetHandle,
    dataset: &Dataset,
    opts: &SegEvalOptions,
    prefix: &str,
) -> Result<Vec<CaseScore>> {
    let data = match opts.case_cap {
        Some((cap, seed)) if cap < dataset.len() => dataset.subsample(cap, seed)?,
        _ => dataset.clone(),
    };
    let inputs: Vec<&VoxelGrid> = data.samples.iter().map(|s| &s.sample.defective_skull).collect();
    let preds = vnet_predict(h, &inputs, opts.batch)?;
    let eval_dims = [opts.eval_resolution; 3];
    let mut out = Vec::with_capacity(preds.len());
    for (i, (pred, s)) in preds.iter().zip(&data.samples).enumerate() {
        let pred_bin = binarize(pred, 0.5)?;
        let pred_up = resample(&pred_bin, eval_dims)?;
        let truth_up = resample(&s.sample.defect, eval_dims)?;
        let dsc = dice_coefficient(&pred_up, &truth_up)?;
        let class = s.class.map_or("synthetic", |c| c.name());
        out.push(CaseScore {
            case_id: format!("{prefix}skull{}_{}_{i}", s.skull_id, class),
            dsc,
        });
    }
    Ok(out)
}

/// Evaluates one dataset and groups scores by its own split tags.
pub fn evaluate_segmentation(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    eval_resolution: usize,
) -> Result<SegReport> {
    let h = load_vnet(ckpt)?;
    let opts = SegEvalOptions {
        eval_resolution,
        ..SegEvalOptions::default()
    };
    let mut groups = Vec::new();
    for split in [
        cranio_core::Split::Train,
        cranio_core::Split::Validation,
        cranio_core::Split::Test,
    ] {
        let subset = dataset.filter_split(split);
        if subset.is_empty() {
            continue;
        }
        let cases = evaluate_cases(&h, &subset, &opts, "")?;
        groups.push(SplitScores::from_cases(split.name(), cases));
    }
    Ok(SegReport {
        model: "vnet".into(),
        train_size: 0,
        groups,
    })
}

// ---------------------------------------------------------------------------
// the Dice-table experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TableExperimentConfig {
    /// Synthetic training-set sizes (one V-Net per model x size x seed).
    pub subset_sizes: Vec<usize>,
    /// Seeds for subsampling and V-Net initialization; scores are pooled.
    pub seeds: Vec<u64>,
    /// V-Net training configuration (step budget via `max_steps`).
    pub vnet: TrainConfig,
    pub synthesis: SynthesisConfig,
    pub eval_resolution: usize,
    /// Cap on evaluated cases for the train-synthetic and validation
    /// groups (the test group is always evaluated in full).
    pub eval_case_cap: Option<usize>,
    /// Add a V-Net trained directly on the real training split.
    pub include_baseline: bool,
}

pub const BASELINE_MODEL_NAME: &str = "without_augmentation";

/// Trains one V-Net per (generator model, subset size, seed), evaluates each
/// against synthetic training data, generator-seen phantoms (validation) and
/// held-out phantoms (test), and pools the per-case scores over seeds.
pub fn run_table_experiment(
    models: &[(String, &Checkpoint)],
    real_train: &Dataset,
    real_test: &Dataset,
    cfg: &TableExperimentConfig,
) -> Result<Vec<SegReport>> {
    if cfg.subset_sizes.is_empty() {
        return Err(PipelineError::InvalidArgument("no subset sizes".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(PipelineError::InvalidArgument("no seeds".into()));
    }
    let max_size = *cfg.subset_sizes.iter().max().unwrap();
    if cfg.synthesis.count < max_size {
        return Err(PipelineError::InvalidArgument(format!(
            "synthesis count {} is smaller than the largest subset {max_size}",
            cfg.synthesis.count
        )));
    }
    let mut reports = Vec::new();
    for (name, ckpt) in models {
        log::info!("table experiment: synthesizing {} samples from {name}", cfg.synthesis.count);
        let synth = synthesize_dataset(ckpt, &cfg.synthesis)?;
        for &size in &cfg.subset_sizes {
            let mut train_cases = Vec::new();
            let mut val_cases = Vec::new();
            let mut test_cases = Vec::new();
            for (si, &seed) in cfg.seeds.iter().enumerate() {
                let subset = synth.subsample(size, derive_seed(seed, 0xeb, size as u64))?;
                let mut vnet_cfg = cfg.vnet.clone();
                vnet_cfg.seed = derive_seed(seed, 0xf1, size as u64);
                log::info!("training v-net: model {name}, size {size}, seed {seed}");
                let out = train_vnet(&vnet_cfg, &subset, None, None)?;
                let h = load_vnet(&out.checkpoint)?;
                let capped = SegEvalOptions {
                    eval_resolution: cfg.eval_resolution,
                    batch: cfg.vnet.batch_size,
                    case_cap: cfg.eval_case_cap.map(|c| (c, derive_seed(seed, 0xca, 0))),
                };
                let full = SegEvalOptions {
                    case_cap: None,
                    ..capped
                };
                let p = format!("s{si}_");
                train_cases.extend(evaluate_cases(&h, &subset, &capped, &p)?);
                val_cases.extend(evaluate_cases(&h, real_train, &capped, &p)?);
                test_cases.extend(evaluate_cases(&h, real_test, &full, &p)?);
            }
            reports.push(SegReport {
                model: name.clone(),
                train_size: size,
                groups: vec![
                    SplitScores::from_cases("train_synthetic", train_cases),
                    SplitScores::from_cases("validation", val_cases),
                    SplitScores::from_cases("test", test_cases),
                ],
            });
        }
    }
    if cfg.include_baseline {
        let mut val_cases = Vec::new();
        let mut test_cases = Vec::new();
        for (si, &seed) in cfg.seeds.iter().enumerate() {
            let mut vnet_cfg = cfg.vnet.clone();
            vnet_cfg.seed = derive_seed(seed, 0xba, 0);
            log::info!("training baseline v-net on {} real samples", real_train.len());
            let out = train_vnet(&vnet_cfg, real_train, None, None)?;
            let h = load_vnet(&out.checkpoint)?;
            let capped = SegEvalOptions {
                eval_resolution: cfg.eval_resolution,
                batch: cfg.vnet.batch_size,
                case_cap: cfg.eval_case_cap.map(|c| (c, derive_seed(seed, 0xca, 1))),
            };
            let full = SegEvalOptions {
                case_cap: None,
                ..capped
            };
            let p = format!("s{si}_");
            val_cases.extend(evaluate_cases(&h, real_train, &capped, &p)?);
            test_cases.extend(evaluate_cases(&h, real_test, &full, &p)?);
        }
        reports.push(SegReport {
            model: BASELINE_MODEL_NAME.into(),
            train_size: real_train.len(),
            groups: vec![
                SplitScores::from_cases("validation", val_cases),
                SplitScores::from_cases("test", test_cases),
            ],
        });
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// embeddings
// ---------------------------------------------------------------------------

/// Feature extraction for the embedding export.
pub enum FeatureMode<'a> {
    /// Flattened nearest-neighbor-downsampled defective-skull channel
    /// (`side^3` features).
    FlattenDownsampled { side: usize },
    /// Posterior mean of a checkpointed encoder (`latent_dim` features).
    EncoderLatent { checkpoint: &'a Checkpoint },
}

#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub labels: Vec<String>,
    pub row_ids: Vec<String>,
    pub data: Array2<f64>,
}

/// Stacks one row per sample, ordered by source then sample index.
pub fn build_embedding_matrix(
    sources: &[(&str, &Dataset)],
    mode: &FeatureMode<'_>,
) -> Result<EmbeddingMatrix> {
    if sources.is_empty() {
        return Err(PipelineError::InvalidArgument("no sources".into()));
    }
    let mut labels = Vec::new();
    let mut row_ids = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    match mode {
        FeatureMode::FlattenDownsampled { side } => {
            if *side == 0 {
                return Err(PipelineError::InvalidArgument("side must be >= 1".into()));
            }
            for (label, ds) in sources {
                for (i, s) in ds.samples.iter().enumerate() {
                    let down = resample(&s.sample.defective_skull, [*side; 3])?;
                    rows.push(down.bytes().iter().map(|&b| b as f64).collect());
                    labels.push(label.to_string());
                    row_ids.push(format!("{label}/{i}"));
                }
            }
        }
        FeatureMode::EncoderLatent { checkpoint } => {
            let state = checkpoint
                .find_net("encoder")
                .or_else(|| checkpoint.find_net("inference"))
                .ok_or_else(|| {
                    PipelineError::InvalidArgument(
                        "checkpoint has no encoder for latent features".into(),
                    )
                })?
                .clone();
            let BuiltNet::Encoder(enc) = state.arch.build()? else {
                return Err(PipelineError::Checkpoint("encoder net has wrong kind".into()));
            };
            let res = enc.cfg.resolution;
            for (label, ds) in sources {
                if ds.resolution != [res; 3] {
                    return Err(PipelineError::Model(cranio_model::ModelError::Shape(
                        format!(
                            "dataset resolution {:?} does not match encoder {res}^3",
                            ds.resolution
                        ),
                    )));
                }
                for (i, s) in ds.samples.iter().enumerate() {
                    let arr = cranio_core::dataset::sample_to_array(&s.sample);
                    let mut batch = ArrayD::<f32>::zeros(IxDyn(&[1, res, res, res, 2]));
                    batch.index_axis_mut(Axis(0), 0).assign(&arr);
                    let mut g: Graph<f32> = Graph::new();
                    let params = bind_params(&mut g, &state.params);
                    let x = g.leaf(batch);
                    let post = enc.forward(&mut g, &params, x)?;
                    rows.push(g.value(post.mu).iter().map(|&v| v as f64).collect());
                    labels.push(label.to_string());
                    row_ids.push(format!("{label}/{i}"));
                }
            }
        }
    }
    let d = rows.first().map_or(0, |r| r.len());
    let mut data = Array2::<f64>::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            data[[i, j]] = v;
        }
    }
    Ok(EmbeddingMatrix {
        labels,
        row_ids,
        data,
    })
}

// ---------------------------------------------------------------------------
// 2-D PCA
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Pca2d {
    /// One (x, y) score per input row.
    pub coords: Array2<f64>,
    /// Fraction of total variance along each of the two axes.
    pub explained: [f64; 2],
}

/// Top-2 eigenpairs of a symmetric PSD matrix by orthogonal (block power)
/// iteration with a Rayleigh-Ritz rotation.
fn top2_symmetric(a: &Array2<f64>) -> (f64, f64, Vec<f64>, Vec<f64>) {
    let k = a.nrows();
    // deterministic pseudo-random start
    let mut v1: Vec<f64> = (0..k)
        .map(|i| ((i as f64 * 12.9898).sin() * 43758.5453).fract() - 0.5)
        .collect();
    let mut v2: Vec<f64> = (0..k)
        .map(|i| ((i as f64 * 78.233).sin() * 12543.8567).fract() - 0.5)
        .collect();
    let matvec = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; k];
        for i in 0..k {
            let row = a.row(i);
            out[i] = row.iter().zip(v).map(|(x, y)| x * y).sum();
        }
        out
    };
    let dot = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(a, b)| a * b).sum() };
    let normalize = |v: &mut Vec<f64>| -> f64 {
        let n = dot(v, v).sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        n
    };
    normalize(&mut v1);
    let p = dot(&v1, &v2);
    v2.iter_mut().zip(&v1).for_each(|(x, u)| *x -= p * u);
    normalize(&mut v2);

    let (mut l1, mut l2) = (0.0, 0.0);
    for _ in 0..1000 {
        let mut w1 = matvec(&v1);
        let mut w2 = matvec(&v2);
        let n1 = normalize(&mut w1);
        if n1 == 0.0 {
            // rank-0 matrix: keep the current orthonormal basis
            break;
        }
        let p = dot(&w1, &w2);
        w2.iter_mut().zip(&w1).for_each(|(x, u)| *x -= p * u);
        let n2 = normalize(&mut w2);
        if n2 < 1e-300 {
            // rank-1: complete the basis deterministically
            w2 = v2.clone();
            let p = dot(&w1, &w2);
            w2.iter_mut().zip(&w1).for_each(|(x, u)| *x -= p * u);
            normalize(&mut w2);
        }
        v1 = w1;
        v2 = w2;
        // Rayleigh-Ritz on the 2-D subspace
        let av1 = matvec(&v1);
        let av2 = matvec(&v2);
        let b11 = dot(&v1, &av1);
        let b12 = dot(&v1, &av2);
        let b22 = dot(&v2, &av2);
        let theta = 0.5 * (2.0 * b12).atan2(b11 - b22);
        let (c, s) = (theta.cos(), theta.sin());
        let r1: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| c * a + s * b).collect();
        let r2: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| -s * a + c * b).collect();
        let e1 = c * c * b11 + 2.0 * c * s * b12 + s * s * b22;
        let e2 = s * s * b11 - 2.0 * c * s * b12 + c * c * b22;
        let (e1, e2, r1, r2) = if e1 >= e2 {
            (e1, e2, r1, r2)
        } else {
            (e2, e1, r2, r1)
        };
        let scale = e1.abs().max(1.0);
        let converged = (e1 - l1).abs() < 1e-14 * scale && (e2 - l2).abs() < 1e-14 * scale;
        v1 = r1;
        v2 = r2;
        l1 = e1;
        l2 = e2;
        if converged {
            break;
        }
    }
    (l1.max(0.0), l2.max(0.0), v1, v2)
}

/// Mean-centered projection onto the top-2 principal directions.
///
/// Deterministic: the sign of each axis is fixed by making its
/// largest-magnitude feature loading positive.
pub fn project_pca_2d(m: &EmbeddingMatrix) -> Result<Pca2d> {
    let n = m.data.nrows();
    let d = m.data.ncols();
    if n < 3 {
        return Err(PipelineError::InvalidArgument(format!(
            "PCA needs at least 3 rows, got {n}"
        )));
    }
    let mean = m.data.mean_axis(Axis(0)).expect("n >= 3");
    let mut xc = m.data.clone();
    for mut row in xc.rows_mut() {
        row -= &mean;
    }
    let total: f64 = xc.iter().map(|v| v * v).sum();
    if total <= 1e-12 {
        return Err(PipelineError::InvalidArgument(
            "degenerate input: zero variance".into(),
        ));
    }

    // eigendecompose the smaller Gram matrix
    let (l1, l2, scores1, scores2, load1, load2) = if n <= d {
        let s = xc.dot(&xc.t());
        let (l1, l2, u1, u2) = top2_symmetric(&s);
        let to_loading = |u: &[f64], l: f64| -> Vec<f64> {
            if l <= 0.0 {
                return vec![0.0; d];
            }
            let ua = ndarray::Array1::from(u.to_vec());
            (xc.t().dot(&ua) / l.sqrt()).to_vec()
        };
        let loading1 = to_loading(&u1, l1);
        let loading2 = to_loading(&u2, l2);
        let s1: Vec<f64> = u1.iter().map(|&u| u * l1.sqrt()).collect();
        let s2: Vec<f64> = u2.iter().map(|&u| u * l2.sqrt()).collect();
        (l1, l2, s1, s2, loading1, loading2)
    } else {
        let c = xc.t().dot(&xc);
        let (l1, l2, w1, w2) = top2_symmetric(&c.as_standard_layout().to_owned());
        let v1 = ndarray::Array1::from(w1.clone());
        let v2 = ndarray::Array1::from(w2.clone());
        let s1 = xc.dot(&v1).to_vec();
        let s2 = xc.dot(&v2).to_vec();
        (l1, l2, s1, s2, w1, w2)
    };

    let mut coords = Array2::<f64>::zeros((n, 2));
    for i in 0..n {
        coords[[i, 0]] = scores1[i];
        coords[[i, 1]] = scores2[i];
    }
    // sign convention: largest-magnitude loading positive per axis
    for (axis, loading) in [(0, &load1), (1, &load2)] {
        let max_idx = loading
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if loading[max_idx] < 0.0 {
            for i in 0..n {
                coords[[i, axis]] = -coords[[i, axis]];
            }
        }
    }
    Ok(Pca2d {
        coords,
        explained: [l1 / total, l2 / total],
    })
}

// ---------------------------------------------------------------------------
// report export
// ---------------------------------------------------------------------------

fn csv_err(e: csv::Error) -> PipelineError {
    PipelineError::Io(std::io::Error::other(e))
}

/// Writes `seg_report.csv` (per case), `summary.csv` (per group) and an
/// aligned `table.txt` into `dir`.
pub fn export_report(reports: &[SegReport], dir: impl AsRef<Path>) -> Result<()> {
    if reports.is_empty() {
        return Err(PipelineError::InvalidArgument("no reports".into()));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;

    let mut per_case = csv::Writer::from_path(dir.join("seg_report.csv")).map_err(csv_err)?;
    per_case
        .write_record(["model", "train_size", "split", "case_id", "dsc"])
        .map_err(csv_err)?;
    for r in reports {
        for g in &r.groups {
            for c in &g.cases {
                per_case
                    .write_record([
                        r.model.clone(),
                        r.train_size.to_string(),
                        g.split.clone(),
                        c.case_id.clone(),
                        format!("{}", c.dsc),
                    ])
                    .map_err(csv_err)?;
            }
        }
    }
    per_case.flush()?;

    let mut summary = csv::Writer::from_path(dir.join("summary.csv")).map_err(csv_err)?;
    summary
        .write_record(["model", "train_size", "split", "mean_dsc", "std_dsc", "n"])
        .map_err(csv_err)?;
    for r in reports {
        for g in &r.groups {
            summary
                .write_record([
                    r.model.clone(),
                    r.train_size.to_string(),
                    g.split.clone(),
                    format!("{}", g.mean),
                    format!("{}", g.std),
                    g.cases.len().to_string(),
                ])
                .map_err(csv_err)?;
        }
    }
    summary.flush()?;

    let fmt = |r: &SegReport, split: &str| -> String {
        r.group(split)
            .map_or_else(|| "-".to_string(), |g| format!("{:.3}", g.mean))
    };
    let mut table = String::new();
    table.push_str(&format!(
        "{:<24} {:>10} {:>16} {:>12} {:>8}\n",
        "Model", "Instances", "Train synthetic", "Validation", "Test"
    ));
    for r in reports {
        table.push_str(&format!(
            "{:<24} {:>10} {:>16} {:>12} {:>8}\n",
            r.model,
            r.train_size,
            fmt(r, "train_synthetic"),
            fmt(r, "validation"),
            fmt(r, "test"),
        ));
    }
    std::fs::write(dir.join("table.txt"), table)?;
    Ok(())
}

/// Writes `embedding_matrix.csv` (raw features) and, after projection,
/// `embedding.csv` with `source,row_id,x,y`.
pub fn export_embedding(
    m: &EmbeddingMatrix,
    projection: Option<&Pca2d>,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut raw = csv::Writer::from_path(dir.join("embedding_matrix.csv")).map_err(csv_err)?;
    let mut header = vec!["source".to_string(), "row_id".to_string()];
    header.extend((0..m.data.ncols()).map(|j| format!("f{j}")));
    raw.write_record(&header).map_err(csv_err)?;
    for i in 0..m.data.nrows() {
        let mut rec = vec![m.labels[i].clone(), m.row_ids[i].clone()];
        rec.extend(m.data.row(i).iter().map(|v| format!("{v}")));
        raw.write_record(&rec).map_err(csv_err)?;
    }
    raw.flush()?;

    if let Some(p) = projection {
        let mut w = csv::Writer::from_path(dir.join("embedding.csv")).map_err(csv_err)?;
        w.write_record(["source", "row_id", "x", "y"]).map_err(csv_err)?;
        for i in 0..m.data.nrows() {
            w.write_record([
                m.labels[i].clone(),
                m.row_ids[i].clone(),
                format!("{}", p.coords[[i, 0]]),
                format!("{}", p.coords[[i, 1]]),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(())
}
