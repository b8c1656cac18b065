//! Dataset construction, on-disk layout and batch iteration.
//!
//! A dataset directory holds one `.vxg` file per grid plus a
//! `manifest.json` naming every sample, its defect class, seeds and split
//! tag. Phantom datasets also persist the complete skulls; synthetic
//! datasets use the same layout so both are interchangeable downstream.

use crate::error::{CoreError, Result};
use crate::phantom::{carve_defect, make_complete_skull, DefectClass, PhantomParams};
use crate::voxel::{SkullSample, VoxelGrid};
use crate::vxg::{read_vxg, write_vxg};
use crate::derive_seed;
use ndarray::{Array4, Array5};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MANIFEST_VERSION: u32 = 1;
const SEED_TAG_SKULL: u64 = 0x51;
const SEED_TAG_DEFECT: u64 = 0xde;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// One (defective skull, defect) pair with its provenance.
#[derive(Debug, Clone)]
pub struct DatasetSample {
    pub sample: SkullSample,
    pub split: Split,
    pub skull_id: usize,
    /// `None` marks synthetic samples, which have no defect class.
    pub class: Option<DefectClass>,
    pub defect_seed: u64,
}

#[derive(Debug, Clone)]
pub struct CompleteSkull {
    pub skull_id: usize,
    pub skull_seed: u64,
    pub grid: VoxelGrid,
}

/// Provenance of a synthetic dataset: which generator produced it and how.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub checkpoint_sha256: String,
    pub latent_seed: u64,
    pub discarded: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub kind: String,
    pub resolution: [usize; 3],
    pub seed: u64,
    pub samples: Vec<DatasetSample>,
    pub complete_skulls: Vec<CompleteSkull>,
    pub generator: Option<GeneratorInfo>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples belonging to one split, with their complete skulls.
    pub fn filter_split(&self, split: Split) -> Dataset {
        let samples: Vec<DatasetSample> = self
            .samples
            .iter()
            .filter(|s| s.split == split)
            .cloned()
            .collect();
        let ids: std::collections::HashSet<usize> =
            samples.iter().map(|s| s.skull_id).collect();
        Dataset {
            kind: self.kind.clone(),
            resolution: self.resolution,
            seed: self.seed,
            complete_skulls: self
                .complete_skulls
                .iter()
                .filter(|c| ids.contains(&c.skull_id))
                .cloned()
                .collect(),
            samples,
            generator: self.generator.clone(),
        }
    }

    /// Deterministic random subset of `n` samples without replacement.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n > self.samples.len() {
            return Err(CoreError::InvalidArgument(format!(
                "requested {n} samples from a dataset of {}",
                self.samples.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx.sort_unstable();
        Ok(Dataset {
            kind: self.kind.clone(),
            resolution: self.resolution,
            seed: self.seed,
            samples: idx.into_iter().map(|i| self.samples[i].clone()).collect(),
            complete_skulls: self.complete_skulls.clone(),
            generator: self.generator.clone(),
        })
    }

    pub fn skull_ids(&self) -> std::collections::BTreeSet<usize> {
        self.samples.iter().map(|s| s.skull_id).collect()
    }

    /// Seeded-shuffle batch stream of two-channel arrays
    /// `(batch, depth, height, width, 2)`; the final short batch is emitted.
    pub fn batches(&self, batch_size: usize, shuffle_seed: u64) -> Result<BatchIter<'_>> {
        if batch_size == 0 {
            return Err(CoreError::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.samples.is_empty() {
            return Err(CoreError::InvalidArgument("dataset is empty".into()));
        }
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        order.shuffle(&mut rng);
        Ok(BatchIter {
            dataset: self,
            order,
            batch_size,
            cursor: 0,
        })
    }
}

/// Converts one sample to a `(depth, height, width, 2)` array with channel 0
/// the defective skull and channel 1 the defect, values in `{0.0, 1.0}`.
pub fn sample_to_array(s: &SkullSample) -> Array4<f32> {
    let [d, h, w] = s.dims();
    let mut out = Array4::<f32>::zeros((d, h, w, 2));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                out[(z, y, x, 0)] = s.defective_skull.get(z, y, x) as u8 as f32;
                out[(z, y, x, 1)] = s.defect.get(z, y, x) as u8 as f32;
            }
        }
    }
    out
}

pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl<'a> BatchIter<'a> {
    /// Total number of batches in one epoch.
    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Array5<f32>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let ids = &self.order[self.cursor..end];
        self.cursor = end;
        let [d, h, w] = self.dataset.resolution;
        let mut out = Array5::<f32>::zeros((ids.len(), d, h, w, 2));
        for (b, &i) in ids.iter().enumerate() {
            let arr = sample_to_array(&self.dataset.samples[i].sample);
            out.index_axis_mut(ndarray::Axis(0), b).assign(&arr);
        }
        Some(out)
    }
}

/// Assigns `n` skulls to (train, validation, test) so that counts follow the
/// fractions by cumulative rounding and every positive fraction receives at
/// least one skull.
fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|&f| f < 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "split fractions {fractions:?} must be non-negative"
        )));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CoreError::InvalidArgument(format!(
            "split fractions {fractions:?} sum to {sum}, expected 1"
        )));
    }
    let nonzero = fractions.iter().filter(|&&f| f > 0.0).count();
    if n < nonzero {
        return Err(CoreError::InvalidArgument(format!(
            "{n} skulls cannot cover {nonzero} splits"
        )));
    }
    let b1 = (fractions[0] * n as f64).round() as usize;
    let b2 = ((fractions[0] + fractions[1]) * n as f64).round() as usize;
    let mut counts = [b1.min(n), b2.saturating_sub(b1).min(n), 0];
    counts[2] = n - counts[0] - counts[1];
    // guarantee one skull per requested split
    for i in 0..3 {
        if fractions[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3)
                .max_by_key(|&j| counts[j])
                .expect("nonempty");
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    Ok(counts)
}

/// Builds a phantom dataset: `n_skulls` ellipsoid-shell skulls, five defect
/// samples each, split at skull level so no skull spans two splits.
/// Deterministic in `(n_skulls, params)`.
pub fn build_dataset(
    n_skulls: usize,
    p: &PhantomParams,
    split_fractions: [f64; 3],
) -> Result<Dataset> {
    p.validate()?;
    if n_skulls == 0 {
        return Err(CoreError::InvalidArgument("n_skulls must be >= 1".into()));
    }
    let counts = split_counts(n_skulls, split_fractions)?;
    let split_of = |i: usize| -> Split {
        if i < counts[0] {
            Split::Train
        } else if i < counts[0] + counts[1] {
            Split::Validation
        } else {
            Split::Test
        }
    };

    let mut dataset = Dataset {
        kind: "phantom".into(),
        resolution: [p.resolution; 3],
        seed: p.seed,
        ..Dataset::default()
    };
    for i in 0..n_skulls {
        let skull_seed = derive_seed(p.seed, SEED_TAG_SKULL, i as u64);
        let grid = make_complete_skull(p, skull_seed)?;
        let split = split_of(i);
        for (ci, cls) in DefectClass::ALL.into_iter().enumerate() {
            let defect_seed = derive_seed(p.seed, SEED_TAG_DEFECT, (i * 8 + ci) as u64);
            let sample = carve_defect(&grid, cls, defect_seed)?;
            dataset.samples.push(DatasetSample {
                sample,
                split,
                skull_id: i,
                class: Some(cls),
                defect_seed,
            });
        }
        dataset.complete_skulls.push(CompleteSkull {
            skull_id: i,
            skull_seed,
            grid,
        });
    }
    Ok(dataset)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    kind: String,
    resolution: [usize; 3],
    seed: u64,
    samples: Vec<ManifestSample>,
    complete_skulls: Vec<ManifestSkull>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<GeneratorInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSample {
    skull_id: usize,
    class: String,
    defect_seed: u64,
    split: Split,
    defective: String,
    defect: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSkull {
    skull_id: usize,
    skull_seed: u64,
    file: String,
}

impl Dataset {
    /// Writes every grid as `.vxg` plus `manifest.json` into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut manifest = Manifest {
            version: MANIFEST_VERSION,
            kind: self.kind.clone(),
            resolution: self.resolution,
            seed: self.seed,
            samples: Vec::with_capacity(self.samples.len()),
            complete_skulls: Vec::with_capacity(self.complete_skulls.len()),
            generator: self.generator.clone(),
        };
        for (i, s) in self.samples.iter().enumerate() {
            let class = s.class.map_or("synthetic", |c| c.name());
            // synthetic datasets may emit several samples per skull id
            let stem = match s.class {
                Some(c) => format!("skull_{}_{}", s.skull_id, c.name()),
                None => format!("skull_{}_synthetic_{i}", s.skull_id),
            };
            let defective = format!("{stem}_defective.vxg");
            let defect = format!("{stem}_defect.vxg");
            write_vxg(&s.sample.defective_skull, dir.join(&defective))?;
            write_vxg(&s.sample.defect, dir.join(&defect))?;
            manifest.samples.push(ManifestSample {
                skull_id: s.skull_id,
                class: class.to_string(),
                defect_seed: s.defect_seed,
                split: s.split,
                defective,
                defect,
            });
        }
        for c in &self.complete_skulls {
            let file = format!("skull_{}_complete.vxg", c.skull_id);
            write_vxg(&c.grid, dir.join(&file))?;
            manifest.complete_skulls.push(ManifestSkull {
                skull_id: c.skull_id,
                skull_seed: c.skull_seed,
                file,
            });
        }
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CoreError::Manifest(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    /// Loads a dataset directory written by [`Dataset::save_dir`] (or any
    /// external data following the same layout).
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let raw = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest =
            serde_json::from_str(&raw).map_err(|e| CoreError::Manifest(e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(CoreError::Manifest(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        let mut dataset = Dataset {
            kind: manifest.kind,
            resolution: manifest.resolution,
            seed: manifest.seed,
            generator: manifest.generator,
            ..Dataset::default()
        };
        for m in manifest.samples {
            let class = if m.class == "synthetic" {
                None
            } else {
                Some(DefectClass::from_name(&m.class).ok_or_else(|| {
                    CoreError::Manifest(format!("unknown defect class {:?}", m.class))
                })?)
            };
            let defective = read_vxg(dir.join(&m.defective))?;
            let defect = read_vxg(dir.join(&m.defect))?;
            dataset.samples.push(DatasetSample {
                sample: SkullSample::new(defective, defect)?,
                split: m.split,
                skull_id: m.skull_id,
                class,
                defect_seed: m.defect_seed,
            });
        }
        for m in manifest.complete_skulls {
            dataset.complete_skulls.push(CompleteSkull {
                skull_id: m.skull_id,
                skull_seed: m.skull_seed,
                grid: read_vxg(dir.join(&m.file))?,
            });
        }
        Ok(dataset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> PhantomParams {
        PhantomParams {
            seed: 42,
            ..PhantomParams::for_resolution(16)
        }
    }

    #[test]
    fn split_counts_follow_fractions() {
        assert_eq!(split_counts(10, [0.8, 0.0, 0.2]).unwrap(), [8, 0, 2]);
        assert_eq!(split_counts(10, [0.6, 0.2, 0.2]).unwrap(), [6, 2, 2]);
        assert!(split_counts(2, [0.5, 0.3, 0.2]).is_err());
        assert!(split_counts(10, [0.5, 0.2, 0.2]).is_err());
    }

    #[test]
    fn build_dataset_counts_and_splits() {
        let d = build_dataset(10, &small_params(), [0.8, 0.0, 0.2]).unwrap();
        assert_eq!(d.len(), 50);
        assert_eq!(d.filter_split(Split::Train).len(), 40);
        assert_eq!(d.filter_split(Split::Test).len(), 10);
        // skull-level split: no skull id in two splits
        let train_ids = d.filter_split(Split::Train).skull_ids();
        let test_ids = d.filter_split(Split::Test).skull_ids();
        assert!(train_ids.is_disjoint(&test_ids));
    }

    #[test]
    fn build_dataset_is_deterministic() {
        let a = build_dataset(3, &small_params(), [0.8, 0.0, 0.2]).unwrap();
        let b = build_dataset(3, &small_params(), [0.8, 0.0, 0.2]).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.sample.defect, y.sample.defect);
            assert_eq!(x.sample.defective_skull, y.sample.defective_skull);
        }
    }

    #[test]
    fn dataset_invariants_hold_for_generated_samples() {
        let d = build_dataset(4, &small_params(), [0.5, 0.25, 0.25]).unwrap();
        // five samples per skull, one per class
        for skull in &d.complete_skulls {
            let classes: Vec<DefectClass> = d
                .samples
                .iter()
                .filter(|s| s.skull_id == skull.skull_id)
                .map(|s| s.class.unwrap())
                .collect();
            assert_eq!(classes.len(), 5);
        }
        for s in &d.samples {
            let complete = &d
                .complete_skulls
                .iter()
                .find(|c| c.skull_id == s.skull_id)
                .unwrap()
                .grid;
            assert!(!s.sample.defect.is_blank());
            assert_eq!(&s.sample.defective_skull.or(&s.sample.defect).unwrap(), complete);
            assert!(s.sample.is_disjoint());
        }
    }

    #[test]
    fn batch_iterator_shapes_and_determinism() {
        let d = build_dataset(8, &small_params(), [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(d.len(), 40);
        let sizes: Vec<usize> = d.batches(8, 1).unwrap().map(|b| b.shape()[0]).collect();
        assert_eq!(sizes, vec![8, 8, 8, 8, 8]);

        // 41 samples: 5 full batches plus a remainder of 1
        let mut d41 = d.clone();
        d41.samples.push(d.samples[0].clone());
        let sizes: Vec<usize> = d41.batches(8, 1).unwrap().map(|b| b.shape()[0]).collect();
        assert_eq!(sizes, vec![8, 8, 8, 8, 8, 1]);

        let a: Vec<f32> = d.batches(8, 7).unwrap().flat_map(|b| b.into_iter().collect::<Vec<_>>()).collect();
        let b: Vec<f32> = d.batches(8, 7).unwrap().flat_map(|b| b.into_iter().collect::<Vec<_>>()).collect();
        assert_eq!(a, b);
        let c: Vec<f32> = d.batches(8, 8).unwrap().flat_map(|b| b.into_iter().collect::<Vec<_>>()).collect();
        assert_ne!(a, c, "different shuffle seeds should reorder batches");

        for batch in d.batches(8, 3).unwrap() {
            for &v in batch.iter() {
                assert!(v == 0.0 || v == 1.0);
            }
        }
    }

    #[test]
    fn batch_iterator_rejects_empty_and_zero_batch() {
        let d = Dataset::default();
        assert!(d.batches(8, 0).is_err());
        let d = build_dataset(1, &small_params(), [1.0, 0.0, 0.0]).unwrap();
        assert!(d.batches(0, 0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = build_dataset(2, &small_params(), [0.5, 0.0, 0.5]).unwrap();
        d.save_dir(dir.path()).unwrap();
        let back = Dataset::load_dir(dir.path()).unwrap();
        assert_eq!(back.len(), d.len());
        assert_eq!(back.kind, "phantom");
        assert_eq!(back.resolution, d.resolution);
        for (a, b) in d.samples.iter().zip(&back.samples) {
            assert_eq!(a.sample.defect, b.sample.defect);
            assert_eq!(a.sample.defective_skull, b.sample.defective_skull);
            assert_eq!(a.split, b.split);
            assert_eq!(a.class, b.class);
        }
        assert_eq!(d.complete_skulls.len(), back.complete_skulls.len());
    }

    #[test]
    fn rerun_writes_identical_directory() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let d = build_dataset(2, &small_params(), [1.0, 0.0, 0.0]).unwrap();
        d.save_dir(dir_a.path()).unwrap();
        build_dataset(2, &small_params(), [1.0, 0.0, 0.0])
            .unwrap()
            .save_dir(dir_b.path())
            .unwrap();
        let read_all = |dir: &Path| -> Vec<(String, Vec<u8>)> {
            let mut files: Vec<_> = std::fs::read_dir(dir)
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            files.sort();
            files
                .into_iter()
                .map(|p| {
                    (
                        p.file_name().unwrap().to_string_lossy().into_owned(),
                        std::fs::read(&p).unwrap(),
                    )
                })
                .collect()
        };
        assert_eq!(read_all(dir_a.path()), read_all(dir_b.path()));
    }

    #[test]
    fn subsample_is_deterministic_and_bounded() {
        let d = build_dataset(4, &small_params(), [1.0, 0.0, 0.0]).unwrap();
        let a = d.subsample(7, 9).unwrap();
        let b = d.subsample(7, 9).unwrap();
        assert_eq!(a.len(), 7);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.skull_id, y.skull_id);
            assert_eq!(x.defect_seed, y.defect_seed);
        }
        assert!(d.subsample(100, 0).is_err());
    }
}
