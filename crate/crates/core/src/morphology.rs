//! Connected component labeling and small-component removal.

use crate::error::Result;
use crate::voxel::VoxelGrid;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Voxel neighborhood: faces only, faces+edges, or faces+edges+corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Six,
    #[serde(rename = "18")]
    Eighteen,
    #[serde(rename = "26")]
    TwentySix,
}

impl Default for Connectivity {
    /// 26-neighborhood: the most permissive choice, avoids splitting thin shells.
    fn default() -> Self {
        Connectivity::TwentySix
    }
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let max_manhattan = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let m = dz.abs() + dy.abs() + dx.abs();
                    if m >= 1 && m <= max_manhattan {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

/// Per-voxel component labels (0 = background, components numbered 1..=K)
/// plus the voxel count of each component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMap {
    pub dims: [usize; 3],
    pub labels: Vec<u32>,
    pub counts: Vec<usize>,
}

impl ComponentMap {
    pub fn component_count(&self) -> usize {
        self.counts.len()
    }
}

/// Labels connected foreground components with breadth-first traversal in
/// scan order, so labels are deterministic for a given grid.
pub fn label_components(g: &VoxelGrid, connectivity: Connectivity) -> ComponentMap {
    let dims = g.dims();
    let [d, h, w] = dims;
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; g.len()];
    let mut counts = Vec::new();
    let mut queue = VecDeque::new();

    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let start = g.index(z, y, x);
                if !g.get(z, y, x) || labels[start] != 0 {
                    continue;
                }
                let label = counts.len() as u32 + 1;
                let mut size = 0usize;
                labels[start] = label;
                queue.push_back([z as i64, y as i64, x as i64]);
                while let Some([cz, cy, cx]) = queue.pop_front() {
                    size += 1;
                    for off in &offsets {
                        let nz = cz + off[0];
                        let ny = cy + off[1];
                        let nx = cx + off[2];
                        if nz < 0
                            || ny < 0
                            || nx < 0
                            || nz >= d as i64
                            || ny >= h as i64
                            || nx >= w as i64
                        {
                            continue;
                        }
                        let ni = g.index(nz as usize, ny as usize, nx as usize);
                        if g.bytes()[ni] == 1 && labels[ni] == 0 {
                            labels[ni] = label;
                            queue.push_back([nz, ny, nx]);
                        }
                    }
                }
                counts.push(size);
            }
        }
    }

    ComponentMap {
        dims,
        labels,
        counts,
    }
}

/// Drops every foreground component with fewer than `min_voxels` voxels.
///
/// Idempotent, and monotone in `min_voxels`.
pub fn remove_small_components(
    g: &VoxelGrid,
    min_voxels: usize,
    connectivity: Connectivity,
) -> Result<VoxelGrid> {
    let map = label_components(g, connectivity);
    let keep: Vec<bool> = map.counts.iter().map(|&c| c >= min_voxels).collect();
    let data = map
        .labels
        .iter()
        .map(|&l| {
            if l == 0 {
                0
            } else {
                keep[(l - 1) as usize] as u8
            }
        })
        .collect();
    VoxelGrid::from_raw(g.dims(), data)
}

/// Default minimum component size for artifact cleanup: 0.005% of the grid's
/// voxel count, never below one voxel (104 voxels at 128³, 1 at 16³).
pub fn default_min_component_size(dims: [usize; 3]) -> usize {
    let total = dims[0] * dims[1] * dims[2];
    ((total as f64 * 5e-5) as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn random_grid(dims: [usize; 3], seed: u64, density: f64) -> VoxelGrid {
        let mut s = seed;
        VoxelGrid::from_fn(dims, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f64 / (1u64 << 24) as f64) < density
        })
    }

    /// Independent flood-fill oracle: depth-first with an explicit stack and
    /// reversed neighbor order, so traversal differs from the implementation.
    fn oracle_labels(g: &VoxelGrid, conn: Connectivity) -> (Vec<u32>, Vec<usize>) {
        let [d, h, w] = g.dims();
        let mut offsets = conn.offsets();
        offsets.reverse();
        let mut labels = vec![0u32; g.len()];
        let mut counts = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = g.index(z, y, x);
                    if g.bytes()[i] != 1 || labels[i] != 0 {
                        continue;
                    }
                    let label = counts.len() as u32 + 1;
                    let mut stack = vec![[z as i64, y as i64, x as i64]];
                    labels[i] = label;
                    let mut size = 0;
                    while let Some([cz, cy, cx]) = stack.pop() {
                        size += 1;
                        for off in &offsets {
                            let (nz, ny, nx) = (cz + off[0], cy + off[1], cx + off[2]);
                            if nz < 0 || ny < 0 || nx < 0 {
                                continue;
                            }
                            let (nz, ny, nx) = (nz as usize, ny as usize, nx as usize);
                            if nz >= d || ny >= h || nx >= w {
                                continue;
                            }
                            let ni = g.index(nz, ny, nx);
                            if g.bytes()[ni] == 1 && labels[ni] == 0 {
                                labels[ni] = label;
                                stack.push([nz as i64, ny as i64, nx as i64]);
                            }
                        }
                    }
                    counts.push(size);
                }
            }
        }
        (labels, counts)
    }

    fn assert_same_partition(a: &[u32], ca: &[usize], b: &[u32], cb: &[usize]) {
        assert_eq!(ca.len(), cb.len(), "component count differs");
        let mut fwd: HashMap<u32, u32> = HashMap::new();
        for (&la, &lb) in a.iter().zip(b) {
            assert_eq!(la == 0, lb == 0, "foreground mask differs");
            if la != 0 {
                let mapped = fwd.entry(la).or_insert(lb);
                assert_eq!(*mapped, lb, "labels are not a bijection");
            }
        }
        let mut sa = ca.to_vec();
        let mut sb = cb.to_vec();
        sa.sort_unstable();
        sb.sort_unstable();
        assert_eq!(sa, sb, "component sizes differ");
    }

    #[test]
    fn empty_grid_has_zero_components() {
        let g = VoxelGrid::zeros([4, 4, 4]);
        let m = label_components(&g, Connectivity::TwentySix);
        assert_eq!(m.component_count(), 0);
        assert!(m.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn two_isolated_points_are_two_components() {
        let mut g = VoxelGrid::zeros([5, 5, 5]);
        g.set(0, 0, 0, true);
        g.set(4, 4, 4, true);
        for conn in [
            Connectivity::Six,
            Connectivity::Eighteen,
            Connectivity::TwentySix,
        ] {
            let m = label_components(&g, conn);
            assert_eq!(m.component_count(), 2);
            assert_eq!(m.counts, vec![1, 1]);
        }
    }

    #[test]
    fn diagonal_neighbors_depend_on_connectivity() {
        let mut g = VoxelGrid::zeros([2, 2, 2]);
        g.set(0, 0, 0, true);
        g.set(1, 1, 1, true); // corner-adjacent only
        assert_eq!(label_components(&g, Connectivity::Six).component_count(), 2);
        assert_eq!(
            label_components(&g, Connectivity::Eighteen).component_count(),
            2
        );
        assert_eq!(
            label_components(&g, Connectivity::TwentySix).component_count(),
            1
        );

        let mut e = VoxelGrid::zeros([2, 2, 2]);
        e.set(0, 0, 0, true);
        e.set(0, 1, 1, true); // edge-adjacent
        assert_eq!(label_components(&e, Connectivity::Six).component_count(), 2);
        assert_eq!(
            label_components(&e, Connectivity::Eighteen).component_count(),
            1
        );
    }

    #[test]
    fn random_grids_match_flood_fill_oracle() {
        for seed in 0..8u64 {
            for conn in [
                Connectivity::Six,
                Connectivity::Eighteen,
                Connectivity::TwentySix,
            ] {
                let g = random_grid([16, 16, 16], seed * 31 + 7, 0.35);
                let m = label_components(&g, conn);
                let (ol, oc) = oracle_labels(&g, conn);
                assert_same_partition(&m.labels, &m.counts, &ol, &oc);
            }
        }
    }

    #[test]
    fn partition_accounts_for_every_foreground_voxel() {
        let g = random_grid([12, 12, 12], 99, 0.4);
        let m = label_components(&g, Connectivity::TwentySix);
        assert_eq!(m.counts.iter().sum::<usize>(), g.count_foreground());
        for (i, &l) in m.labels.iter().enumerate() {
            assert_eq!(l > 0, g.bytes()[i] == 1);
        }
    }

    #[test]
    fn remove_small_zero_threshold_is_identity() {
        let g = random_grid([8, 8, 8], 3, 0.3);
        let out = remove_small_components(&g, 0, Connectivity::TwentySix).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn remove_small_keeps_only_large_components() {
        // one 2x2x2 block (8 voxels, kept at threshold 5) and one isolated voxel
        let mut g = VoxelGrid::zeros([8, 8, 8]);
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    g.set(z, y, x, true);
                }
            }
        }
        g.set(6, 6, 6, true);
        let out = remove_small_components(&g, 5, Connectivity::TwentySix).unwrap();
        assert_eq!(out.count_foreground(), 8);
        assert!(!out.get(6, 6, 6));
    }

    #[test]
    fn remove_small_idempotent_and_monotone() {
        for seed in 0..20u64 {
            let g = random_grid([10, 10, 10], seed, 0.3);
            let once = remove_small_components(&g, 4, Connectivity::TwentySix).unwrap();
            let twice = remove_small_components(&once, 4, Connectivity::TwentySix).unwrap();
            assert_eq!(once, twice, "seed {seed}");
            let stricter = remove_small_components(&g, 9, Connectivity::TwentySix).unwrap();
            for i in 0..g.len() {
                assert!(stricter.bytes()[i] <= once.bytes()[i], "seed {seed} voxel {i}");
            }
        }
    }

    #[test]
    fn default_min_component_size_examples() {
        assert_eq!(default_min_component_size([128, 128, 128]), 104);
        assert_eq!(default_min_component_size([16, 16, 16]), 1);
        assert_eq!(default_min_component_size([32, 32, 32]), 1);
    }
}
