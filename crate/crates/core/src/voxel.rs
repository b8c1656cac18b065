//! Binary voxel grids, real-valued volumes and paired skull samples.
//!
//! A [`VoxelGrid`] stores one occupancy byte per voxel (1 = bone, 0 =
//! background) in depth-major order: index `(z, y, x)` maps to
//! `(z * height + y) * width + x`.

use crate::error::{CoreError, Result};

/// Dense binary occupancy grid over a `(depth, height, width)` lattice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl VoxelGrid {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0; dims[0] * dims[1] * dims[2]],
        }
    }

    /// Builds a grid from raw bytes, validating the binary domain and extent.
    pub fn from_raw(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let expect = dims[0] * dims[1] * dims[2];
        if data.len() != expect {
            return Err(CoreError::InvalidInput(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                expect
            )));
        }
        if let Some(pos) = data.iter().position(|&b| b > 1) {
            return Err(CoreError::InvalidInput(format!(
                "voxel {} has value {} outside {{0, 1}}",
                pos, data[pos]
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut g = Self::zeros(dims);
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    if f(z, y, x) {
                        g.set(z, y, x, true);
                    }
                }
            }
        }
        g
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.index(z, y, x)] == 1
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: bool) {
        let i = self.index(z, y, x);
        self.data[i] = v as u8;
    }

    #[inline]
    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&b| b == 1).count()
    }

    /// True when no voxel is set.
    pub fn is_blank(&self) -> bool {
        self.data.iter().all(|&b| b == 0)
    }

    fn check_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(CoreError::ShapeMismatch {
                a: self.dims,
                b: other.dims,
            });
        }
        Ok(())
    }

    fn zip_map(&self, other: &Self, f: impl Fn(u8, u8) -> u8) -> Result<Self> {
        self.check_dims(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            dims: self.dims,
            data,
        })
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a | b)
    }

    pub fn xor(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a ^ b)
    }

    /// Voxels set in `self` but not in `other`.
    pub fn subtract(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a & (1 - b))
    }
}

/// Real-valued volume in `[0, 1]`, e.g. a generator output before binarization.
#[derive(Debug, Clone, PartialEq)]
pub struct RealVolume {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl RealVolume {
    pub fn from_raw(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let expect = dims[0] * dims[1] * dims[2];
        if data.len() != expect {
            return Err(CoreError::InvalidInput(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_grid(g: &VoxelGrid) -> Self {
        Self {
            dims: g.dims(),
            data: g.bytes().iter().map(|&b| b as f32).collect(),
        }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn values(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Checks the type invariant: every value finite and inside `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(CoreError::InvalidInput(format!(
                    "value {v} at voxel {i} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Clamps every value into `[0, 1]` (used for raw, unsquashed outputs).
    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// A paired (defective skull, defect) sample: the unit of training and synthesis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkullSample {
    pub defective_skull: VoxelGrid,
    pub defect: VoxelGrid,
}

impl SkullSample {
    pub fn new(defective_skull: VoxelGrid, defect: VoxelGrid) -> Result<Self> {
        if defective_skull.dims() != defect.dims() {
            return Err(CoreError::ShapeMismatch {
                a: defective_skull.dims(),
                b: defect.dims(),
            });
        }
        Ok(Self {
            defective_skull,
            defect,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.defective_skull.dims()
    }

    /// True when skull and defect share no voxel (the postprocessed state).
    pub fn is_disjoint(&self) -> bool {
        self.defective_skull
            .bytes()
            .iter()
            .zip(self.defect.bytes())
            .all(|(&a, &b)| a & b == 0)
    }
}

/// Thresholds a real volume into a binary grid; values `>= threshold` map to 1.
pub fn binarize(v: &RealVolume, threshold: f32) -> Result<VoxelGrid> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    if let Some(pos) = v.values().iter().position(|x| !x.is_finite()) {
        return Err(CoreError::InvalidInput(format!(
            "non-finite value at voxel {pos}"
        )));
    }
    let data = v
        .values()
        .iter()
        .map(|&x| (x >= threshold) as u8)
        .collect();
    Ok(VoxelGrid {
        dims: v.dims(),
        data,
    })
}

/// Removes the skull overlap from a generated defect: `XOR(I, AND(I, S))`.
///
/// The result is a subset of `defect` and never intersects `skull`.
pub fn separate_defect(defect: &VoxelGrid, skull: &VoxelGrid) -> Result<VoxelGrid> {
    let overlap = defect.and(skull)?;
    defect.xor(&overlap)
}

/// Sørensen–Dice coefficient `2|A∩B| / (|A| + |B|)`.
///
/// Two empty grids compare as 1 (perfect agreement).
pub fn dice_coefficient(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    a.check_dims(b)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x & y) as usize;
        total += (x + y) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}
