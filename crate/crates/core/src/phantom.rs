//! Seeded synthetic phantoms: Gaussian background noise with quasi-spherical
//! lesions of controlled size and contrast.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64`; normal deviates use `rand_distr::StandardNormal`. The
//! generator draws, in order, one normal deviate per voxel (x-fastest), then
//! for every lesion (largest requested size first, ties by list order) a size
//! jitter and candidate centres until placement succeeds.
//!
//! A lesion of `m` voxels is the set of the `m` voxel centres closest to a
//! random sub-voxel centre, i.e. a ball voxelized by centre inclusion with
//! its radius chosen between the m-th and (m+1)-th nearest voxel distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::components::Connectivity;
use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Dims, Grid, Spacing, Volume};

const MAX_ATTEMPTS: usize = 1000;
/// Relative jitter applied to each requested lesion size.
const SIZE_JITTER: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionSpec {
    pub size_voxels: usize,
    /// Lesion contrast-to-noise ratio: intensity offset divided by `noise_sigma`.
    pub lcnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing_mm: [f64; 3],
    pub lesions: Vec<LesionSpec>,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Lesions from different components keep a Chebyshev gap larger than this.
    #[serde(default = "default_separation")]
    pub min_separation_voxels: usize,
}

fn default_spacing() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

fn default_sigma() -> f64 {
    1.0
}

fn default_separation() -> usize {
    3
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = Dims::new(self.dims[0], self.dims[1], self.dims[2]);
        Grid::new(dims, Spacing(self.spacing_mm))?;
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be > 0, got {}",
                self.noise_sigma
            )));
        }
        if self.min_separation_voxels < 1 {
            return Err(Error::InvalidConfig(
                "min_separation_voxels must be >= 1 so lesions stay distinct components".into(),
            ));
        }
        for (i, l) in self.lesions.iter().enumerate() {
            if l.size_voxels < 1 {
                return Err(Error::InvalidConfig(format!(
                    "lesion {i}: size must be >= 1"
                )));
            }
            if !(l.lcnr.is_finite() && l.lcnr >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "lesion {i}: lcnr must be >= 0"
                )));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(
            Dims::new(self.dims[0], self.dims[1], self.dims[2]),
            Spacing(self.spacing_mm),
        )
    }
}

/// A set of phantoms sharing one spec; case `i` uses seed `phantom.seed + i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSetSpec {
    #[serde(default = "default_prefix")]
    pub name_prefix: String,
    #[serde(default = "default_cases")]
    pub cases: usize,
    pub phantom: PhantomSpec,
}

fn default_prefix() -> String {
    "case".to_string()
}

fn default_cases() -> usize {
    1
}

impl PhantomSetSpec {
    /// `(case name, spec)` for each case.
    pub fn expand(&self) -> Vec<(String, PhantomSpec)> {
        let width = self.cases.saturating_sub(1).to_string().len().max(3);
        (0..self.cases)
            .map(|i| {
                let mut spec = self.phantom.clone();
                spec.seed = spec.seed.wrapping_add(i as u64);
                (format!("{}{:0width$}", self.name_prefix, i), spec)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedLesion {
    pub requested_size: usize,
    pub size: usize,
    /// Sub-voxel centre in voxel coordinates.
    pub center: [f64; 3],
    pub lcnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Volume,
    pub mask: BinaryMask,
    /// In the order of `PhantomSpec::lesions`.
    pub lesions: Vec<PlacedLesion>,
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let grid = spec.grid()?;
    let dims = grid.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut data: Vec<f64> = (0..dims.len())
        .map(|_| spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let mut order: Vec<usize> = (0..spec.lesions.len()).collect();
    order.sort_by(|&a, &b| {
        spec.lesions[b]
            .size_voxels
            .cmp(&spec.lesions[a].size_voxels)
    });

    let mut mask = BinaryMask::empty(&grid);
    let mut forbidden = vec![false; dims.len()];
    let mut placed: Vec<Option<PlacedLesion>> = vec![None; spec.lesions.len()];
    for li in order {
        let l = &spec.lesions[li];
        let (voxels, center) = place_lesion(&mut rng, dims, l.size_voxels, &forbidden)?;
        for &v in &voxels {
            mask.set(v, true);
            data[v] += l.lcnr * spec.noise_sigma;
        }
        mark_forbidden(&mut forbidden, dims, &voxels, spec.min_separation_voxels);
        placed[li] = Some(PlacedLesion {
            requested_size: l.size_voxels,
            size: voxels.len(),
            center,
            lcnr: l.lcnr,
        });
    }

    Ok(Phantom {
        image: Volume::new(dims, grid.spacing, data)?,
        mask,
        lesions: placed.into_iter().map(Option::unwrap).collect(),
    })
}

fn place_lesion(
    rng: &mut ChaCha8Rng,
    dims: Dims,
    requested: usize,
    forbidden: &[bool],
) -> Result<(Vec<usize>, [f64; 3])> {
    let extent = [dims.nx, dims.ny, dims.nz];
    let mut last_reason = String::from("no attempt made");
    for _ in 0..MAX_ATTEMPTS {
        let jitter = 1.0 + SIZE_JITTER * (2.0 * rng.random::<f64>() - 1.0);
        let m = ((requested as f64 * jitter).round() as usize).max(1);
        let radius = (3.0 * m as f64 / (4.0 * std::f64::consts::PI)).cbrt();
        let half = radius + 1.5;
        if extent.iter().any(|&n| (n as f64) < 2.0 * radius) {
            return Err(Error::Placement {
                attempts: 0,
                reason: format!("lesion of {m} voxels does not fit in {:?}", dims.as_tuple()),
            });
        }
        let mut center = [0.0; 3];
        for (c, &n) in center.iter_mut().zip(&extent) {
            let lo = half.min((n as f64 - 1.0) / 2.0);
            let hi = (n as f64 - 1.0 - half).max(lo);
            *c = lo + (hi - lo) * rng.random::<f64>();
        }
        let voxels = nearest_voxels(dims, center, m, half);
        if voxels.len() < m {
            last_reason = format!("only {} of {m} voxels inside the grid", voxels.len());
            continue;
        }
        if voxels.iter().any(|&v| forbidden[v]) {
            last_reason = "overlaps or touches another lesion".into();
            continue;
        }
        if !is_connected(dims, &voxels) {
            last_reason = "voxelized ball not 26-connected".into();
            continue;
        }
        return Ok((voxels, center));
    }
    Err(Error::Placement {
        attempts: MAX_ATTEMPTS,
        reason: last_reason,
    })
}

/// The `m` voxels whose centres are nearest to `center`, ascending linear index.
fn nearest_voxels(dims: Dims, center: [f64; 3], m: usize, half: f64) -> Vec<usize> {
    let extent = [dims.nx, dims.ny, dims.nz];
    let range = |axis: usize| {
        let lo = (center[axis] - half).floor().max(0.0) as usize;
        let hi = ((center[axis] + half).ceil() as usize).min(extent[axis] - 1);
        lo..=hi
    };
    let mut cands: Vec<(f64, usize)> = Vec::new();
    for z in range(2) {
        for y in range(1) {
            for x in range(0) {
                let d = (x as f64 - center[0]).powi(2)
                    + (y as f64 - center[1]).powi(2)
                    + (z as f64 - center[2]).powi(2);
                cands.push((d, dims.index(x, y, z)));
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = cands.into_iter().take(m).map(|(_, i)| i).collect();
    out.sort_unstable();
    out
}

fn is_connected(dims: Dims, voxels: &[usize]) -> bool {
    if voxels.len() <= 1 {
        return true;
    }
    let offsets = Connectivity::TwentySix.offsets();
    let mut seen = vec![false; voxels.len()];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(k) = stack.pop() {
        for &d in &offsets {
            if let Some(n) = dims.offset(voxels[k], d) {
                if let Ok(j) = voxels.binary_search(&n) {
                    if !seen[j] {
                        seen[j] = true;
                        count += 1;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count == voxels.len()
}

fn mark_forbidden(forbidden: &mut [bool], dims: Dims, voxels: &[usize], gap: usize) {
    let g = gap as isize;
    for &v in voxels {
        let (x, y, z) = dims.coords(v);
        for dz in -g..=g {
            for dy in -g..=g {
                for dx in -g..=g {
                    let (px, py, pz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if px >= 0
                        && py >= 0
                        && pz >= 0
                        && (px as usize) < dims.nx
                        && (py as usize) < dims.ny
                        && (pz as usize) < dims.nz
                    {
                        forbidden[dims.index(px as usize, py as usize, pz as usize)] = true;
                    }
                }
            }
        }
    }
}

/// Ten phantoms of 24³ voxels, each with lesions of 3, 8 and 500 voxels at
/// LCNR 1, seeds `base_seed..base_seed + 10`.
pub fn benchmark_set(base_seed: u64) -> PhantomSetSpec {
    PhantomSetSpec {
        name_prefix: "bench".into(),
        cases: 10,
        phantom: PhantomSpec {
            dims: [24, 24, 24],
            spacing_mm: [1.0, 1.0, 1.0],
            lesions: [3, 8, 500]
                .into_iter()
                .map(|size_voxels| LesionSpec {
                    size_voxels,
                    lcnr: 1.0,
                })
                .collect(),
            noise_sigma: 1.0,
            seed: base_seed,
            min_separation_voxels: 3,
        },
    }
}
