//! Nearest-neighbor resampling between grid resolutions.

use crate::error::{CoreError, Result};
use crate::voxel::VoxelGrid;

/// Resamples a binary grid to `new_dims` with nearest-neighbor lookup, which
/// keeps the output strictly binary in both directions.
///
/// Destination voxel centers map to `floor((i + 0.5) * src / dst)` in the
/// source lattice, so an integer-factor upsample followed by the matching
/// downsample is the identity.
pub fn resample(g: &VoxelGrid, new_dims: [usize; 3]) -> Result<VoxelGrid> {
    if new_dims.iter().any(|&d| d == 0) {
        return Err(CoreError::InvalidArgument(format!(
            "target dims {new_dims:?} must be positive"
        )));
    }
    let src = g.dims();
    if src == new_dims {
        return Ok(g.clone());
    }
    let map_axis = |i: usize, s: usize, d: usize| -> usize {
        let pos = (i as f64 + 0.5) * s as f64 / d as f64;
        (pos.floor() as usize).min(s - 1)
    };
    let mut out = VoxelGrid::zeros(new_dims);
    for z in 0..new_dims[0] {
        let sz = map_axis(z, src[0], new_dims[0]);
        for y in 0..new_dims[1] {
            let sy = map_axis(y, src[1], new_dims[1]);
            for x in 0..new_dims[2] {
                let sx = map_axis(x, src[2], new_dims[2]);
                if g.get(sz, sy, sx) {
                    out.set(z, y, x, true);
                }
            }
        }
    }
    Ok(out)
}
