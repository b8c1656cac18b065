//! Procedural skull phantoms: jittered ellipsoid shells with five carved
//! defect classes, the desk-scale stand-in for real defective-skull data.
//!
//! Axis convention: axis 0 (depth) runs inferior→superior, axis 1 (height)
//! posterior→anterior, axis 2 (width) left→right. The mid-sagittal plane is
//! the width midplane.

use crate::error::{CoreError, Result};
use crate::voxel::{SkullSample, VoxelGrid};
use crate::{derive_seed, splitmix64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Radius range for defect cuts, as a fraction of the grid extent.
pub const CUT_RADIUS_RANGE: (f64, f64) = (0.15, 0.35);
const CARVE_RETRIES: usize = 20;

/// Geometry and randomization parameters for ellipsoid-shell phantoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomParams {
    /// Voxel count per axis (cubic grids).
    pub resolution: usize,
    /// Outer ellipsoid radii in voxels, one per axis.
    pub outer_radii: [f64; 3],
    /// Shell thickness in voxels; the inner ellipsoid radii are
    /// `outer - thickness`.
    pub shell_thickness: f64,
    /// Maximum per-axis center displacement in voxels.
    pub center_jitter: f64,
    /// Maximum relative radii perturbation, in `[0, 0.3]`.
    pub radii_jitter_fraction: f64,
    /// Root seed; all per-skull and per-defect seeds derive from it.
    pub seed: u64,
}

impl PhantomParams {
    /// Sensible defaults for a cubic grid of the given resolution.
    pub fn for_resolution(resolution: usize) -> Self {
        let r = resolution as f64;
        Self {
            resolution,
            outer_radii: [0.34 * r, 0.34 * r, 0.34 * r],
            shell_thickness: (r / 10.0).max(1.5),
            center_jitter: 0.03 * r,
            radii_jitter_fraction: 0.08,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(CoreError::Parameter(format!(
                "resolution {} below minimum 8",
                self.resolution
            )));
        }
        if self.shell_thickness < 1.0 {
            return Err(CoreError::Parameter(format!(
                "shell thickness {} below 1 voxel",
                self.shell_thickness
            )));
        }
        if !(0.0..=0.3).contains(&self.radii_jitter_fraction) {
            return Err(CoreError::Parameter(format!(
                "radii jitter fraction {} outside [0, 0.3]",
                self.radii_jitter_fraction
            )));
        }
        let center = (self.resolution as f64 - 1.0) / 2.0;
        for (axis, &r) in self.outer_radii.iter().enumerate() {
            if r <= self.shell_thickness {
                return Err(CoreError::Parameter(format!(
                    "outer radius {r} on axis {axis} not larger than shell thickness"
                )));
            }
            let reach = center + self.center_jitter + r * (1.0 + self.radii_jitter_fraction);
            if reach > self.resolution as f64 - 2.0 {
                return Err(CoreError::Parameter(format!(
                    "radius {r} on axis {axis} cannot keep a 1-voxel margin at resolution {}",
                    self.resolution
                )));
            }
        }
        Ok(())
    }
}

/// The five defect classes carved from each complete skull.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectClass {
    Bilateral,
    Frontoorbital,
    Parietotemporal,
    Random1,
    Random2,
}

impl DefectClass {
    pub const ALL: [DefectClass; 5] = [
        DefectClass::Bilateral,
        DefectClass::Frontoorbital,
        DefectClass::Parietotemporal,
        DefectClass::Random1,
        DefectClass::Random2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefectClass::Bilateral => "bilateral",
            DefectClass::Frontoorbital => "frontoorbital",
            DefectClass::Parietotemporal => "parietotemporal",
            DefectClass::Random1 => "random_1",
            DefectClass::Random2 => "random_2",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl std::fmt::Display for DefectClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Generates one complete skull: a closed hollow ellipsoid shell with
/// per-skull jittered center and radii. Deterministic in `(params, seed)`.
pub fn make_complete_skull(p: &PhantomParams, skull_seed: u64) -> Result<VoxelGrid> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(p.seed) ^ splitmix64(skull_seed));
    let res = p.resolution;
    let c0 = (res as f64 - 1.0) / 2.0;
    let mut center = [c0; 3];
    let mut radii = p.outer_radii;
    for axis in 0..3 {
        center[axis] += rng.gen_range(-p.center_jitter..=p.center_jitter);
        let j = p.radii_jitter_fraction;
        radii[axis] *= 1.0 + rng.gen_range(-j..=j);
    }
    let inner: [f64; 3] = std::array::from_fn(|a| (radii[a] - p.shell_thickness).max(0.0));
    let ellipsoid = |z: f64, y: f64, x: f64, r: &[f64; 3]| -> bool {
        if r.iter().any(|&v| v <= 0.0) {
            return false;
        }
        let q = ((z - center[0]) / r[0]).powi(2)
            + ((y - center[1]) / r[1]).powi(2)
            + ((x - center[2]) / r[2]).powi(2);
        q <= 1.0
    };
    Ok(VoxelGrid::from_fn([res, res, res], |z, y, x| {
        let (z, y, x) = (z as f64, y as f64, x as f64);
        ellipsoid(z, y, x, &radii) && !ellipsoid(z, y, x, &inner)
    }))
}

/// Walks from the grid center along `dir` and returns the last foreground
/// voxel on the ray, i.e. a point on the skull's outer surface.
fn surface_point(skull: &VoxelGrid, dir: [f64; 3]) -> Option<[f64; 3]> {
    let dims = skull.dims();
    let c: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0);
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if norm == 0.0 {
        return None;
    }
    let d: [f64; 3] = std::array::from_fn(|a| dir[a] / norm);
    let max_t = dims.iter().map(|&v| v as f64).fold(0.0, f64::max);
    let mut hit = None;
    let mut t = 0.0;
    while t <= max_t {
        let p: [f64; 3] = std::array::from_fn(|a| c[a] + t * d[a]);
        let idx: [i64; 3] = std::array::from_fn(|a| p[a].round() as i64);
        if idx
            .iter()
            .zip(&dims)
            .any(|(&i, &dim)| i < 0 || i >= dim as i64)
        {
            break;
        }
        if skull.get(idx[0] as usize, idx[1] as usize, idx[2] as usize) {
            hit = Some(p);
        }
        t += 0.5;
    }
    hit
}

fn ball_union(dims: [usize; 3], balls: &[([f64; 3], f64)]) -> VoxelGrid {
    let mut g = VoxelGrid::zeros(dims);
    for &(c, r) in balls {
        let lo: [usize; 3] = std::array::from_fn(|a| ((c[a] - r).floor().max(0.0)) as usize);
        let hi: [usize; 3] =
            std::array::from_fn(|a| ((c[a] + r).ceil() as usize).min(dims[a] - 1));
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    let d2 = (z as f64 - c[0]).powi(2)
                        + (y as f64 - c[1]).powi(2)
                        + (x as f64 - c[2]).powi(2);
                    if d2 <= r * r {
                        g.set(z, y, x, true);
                    }
                }
            }
        }
    }
    g
}

fn sample_unit_dir(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // rejection-sampled direction, uniform on the sphere
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-4 && n2 <= 1.0 {
            let n = n2.sqrt();
            return std::array::from_fn(|a| v[a] / n);
        }
    }
}

/// Builds the cut-region ball set for one defect class.
fn cut_balls(
    skull: &VoxelGrid,
    cls: DefectClass,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<([f64; 3], f64)>> {
    let dims = skull.dims();
    let extent = dims[0].min(dims[1]).min(dims[2]) as f64;
    let sample_radius = |rng: &mut ChaCha8Rng| -> f64 {
        extent * rng.gen_range(CUT_RADIUS_RANGE.0..=CUT_RADIUS_RANGE.1)
    };
    let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-0.15..=0.15);

    match cls {
        DefectClass::Bilateral => {
            // two cuts mirrored across the width midplane, kept apart so the
            // components stay disjoint
            let dir = [jitter(rng) * 2.0, jitter(rng) * 2.0, 1.0];
            let p = surface_point(skull, dir)?;
            let mid = (dims[2] as f64 - 1.0) / 2.0;
            let dist = (p[2] - mid).abs();
            if dist < 2.0 {
                return None;
            }
            let r = sample_radius(rng).min(dist - 1.0);
            let mirrored = [p[0], p[1], (dims[2] as f64 - 1.0) - p[2]];
            Some(vec![(p, r), (mirrored, r)])
        }
        DefectClass::Frontoorbital => {
            // anterior-inferior octant
            let dir = [-0.55 + jitter(rng), 0.85 + jitter(rng), jitter(rng) * 2.0];
            let p = surface_point(skull, dir)?;
            Some(vec![(p, sample_radius(rng))])
        }
        DefectClass::Parietotemporal => {
            // lateral-superior octant, random side
            let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let dir = [0.6 + jitter(rng), jitter(rng) * 2.0, side * (0.85 + jitter(rng))];
            let p = surface_point(skull, dir)?;
            Some(vec![(p, sample_radius(rng))])
        }
        DefectClass::Random1 => {
            let p = surface_point(skull, sample_unit_dir(rng))?;
            Some(vec![(p, sample_radius(rng))])
        }
        DefectClass::Random2 => {
            let count = rng.gen_range(2..=3usize);
            let p0 = surface_point(skull, sample_unit_dir(rng))?;
            let mut balls = vec![(p0, sample_radius(rng))];
            for _ in 1..count {
                let (prev_c, prev_r) = *balls.last().unwrap();
                let dir = sample_unit_dir(rng);
                let step = prev_r * rng.gen_range(0.3..=0.7);
                let c: [f64; 3] = std::array::from_fn(|a| {
                    (prev_c[a] + step * dir[a]).clamp(0.0, dims[a] as f64 - 1.0)
                });
                balls.push((c, sample_radius(rng)));
            }
            Some(balls)
        }
    }
}

/// Carves one defect of the given class out of a complete skull.
///
/// The defect is `AND(skull, cut region)` and the defective skull is
/// `skull \ defect`, so their union reconstitutes the skull and their
/// intersection is empty. Deterministic in `(skull, cls, defect_seed)`.
pub fn carve_defect(
    skull: &VoxelGrid,
    cls: DefectClass,
    defect_seed: u64,
) -> Result<SkullSample> {
    if skull.is_blank() {
        return Err(CoreError::InvalidArgument("skull grid is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(defect_seed, 0x6a11, 0));
    for _ in 0..CARVE_RETRIES {
        let Some(balls) = cut_balls(skull, cls, &mut rng) else {
            continue;
        };
        let cut = ball_union(skull.dims(), &balls);
        let defect = skull.and(&cut)?;
        if defect.is_blank() {
            continue;
        }
        let defective = skull.subtract(&defect)?;
        return SkullSample::new(defective, defect);
    }
    Err(CoreError::Generation(format!(
        "defect class {cls} missed the skull after {CARVE_RETRIES} attempts"
    )))
}
