//! Binary voxel-grid substrate for volumetric skull synthesis.
//!
//! This crate holds the data layer shared by every other crate in the
//! workspace: binary occupancy grids and their boolean algebra, connected
//! component analysis, nearest-neighbor resampling, the `.vxg` file format,
//! procedural skull phantoms with five defect classes, and dataset
//! construction with deterministic train/validation/test splits.
//!
//! All operations are pure functions over immutable inputs and are safe to
//! call from any number of threads.

pub mod dataset;
pub mod error;
pub mod morphology;
pub mod phantom;
pub mod resample;
pub mod voxel;
pub mod vxg;

pub use dataset::{build_dataset, BatchIter, CompleteSkull, Dataset, DatasetSample, Split};
pub use error::CoreError;
pub use morphology::{label_components, remove_small_components, ComponentMap, Connectivity};
pub use phantom::{carve_defect, make_complete_skull, DefectClass, PhantomParams};
pub use resample::resample;
pub use voxel::{binarize, dice_coefficient, separate_defect, RealVolume, SkullSample, VoxelGrid};
pub use vxg::{read_vxg, write_vxg};

/// Stateless 64-bit mixing step (splitmix64 finalizer).
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derives an independent child seed from a root seed and an index so that
/// per-item generation is order-independent.
pub fn derive_seed(root: u64, tag: u64, index: u64) -> u64 {
    splitmix64(root ^ splitmix64(tag.wrapping_mul(0xa076_1d64_78bd_642f) ^ splitmix64(index)))
}
