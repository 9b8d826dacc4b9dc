//! Nearest-neighbour Euclidean distances between voxel sets, in millimetres.
//!
//! Two routes: an exact pairwise scan, and a separable exact Euclidean
//! distance transform (lower envelope of parabolas, one pass per axis) that
//! honours anisotropic spacing. Both return the same distances up to
//! floating-point summation order.

use serde::{Deserialize, Serialize};

use crate::volume::Grid;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMethod {
    BruteForce,
    Transform,
    /// Brute force for small pair counts, transform otherwise.
    #[default]
    Auto,
}

const AUTO_PAIR_LIMIT: usize = 1 << 20;

/// For each voxel in `from`, the distance to the closest voxel in `to`.
/// Returns `None` when `to` is empty.
pub fn nearest_distances(
    grid: &Grid,
    from: &[usize],
    to: &[usize],
    method: DistanceMethod,
) -> Option<Vec<f64>> {
    if to.is_empty() {
        return None;
    }
    let use_transform = match method {
        DistanceMethod::BruteForce => false,
        DistanceMethod::Transform => true,
        DistanceMethod::Auto => from.len().saturating_mul(to.len()) > AUTO_PAIR_LIMIT,
    };
    if use_transform {
        let d2 = squared_distance_transform(grid, to);
        Some(from.iter().map(|&i| d2[i].sqrt()).collect())
    } else {
        Some(
            from.iter()
                .map(|&i| {
                    to.iter()
                        .map(|&j| grid.dist2_mm(i, j))
                        .fold(f64::INFINITY, f64::min)
                        .sqrt()
                })
                .collect(),
        )
    }
}

/// Squared distance (mm²) from every voxel to the nearest site.
pub fn squared_distance_transform(grid: &Grid, sites: &[usize]) -> Vec<f64> {
    let d = grid.dims;
    let mut f = vec![f64::INFINITY; d.len()];
    for &s in sites {
        f[s] = 0.0;
    }
    let longest = d.nx.max(d.ny).max(d.nz);
    let mut scratch = Scratch::new(longest);
    let [sx, sy, sz] = grid.spacing.0;

    let mut line_in = vec![0.0; longest];
    let mut line_out = vec![0.0; longest];
    // x lines
    for z in 0..d.nz {
        for y in 0..d.ny {
            let base = d.index(0, y, z);
            line_in[..d.nx].copy_from_slice(&f[base..base + d.nx]);
            scratch.envelope(&line_in[..d.nx], sx * sx, &mut line_out[..d.nx]);
            f[base..base + d.nx].copy_from_slice(&line_out[..d.nx]);
        }
    }
    // y lines
    for z in 0..d.nz {
        for x in 0..d.nx {
            for y in 0..d.ny {
                line_in[y] = f[d.index(x, y, z)];
            }
            scratch.envelope(&line_in[..d.ny], sy * sy, &mut line_out[..d.ny]);
            for y in 0..d.ny {
                f[d.index(x, y, z)] = line_out[y];
            }
        }
    }
    // z lines
    for y in 0..d.ny {
        for x in 0..d.nx {
            for z in 0..d.nz {
                line_in[z] = f[d.index(x, y, z)];
            }
            scratch.envelope(&line_in[..d.nz], sz * sz, &mut line_out[..d.nz]);
            for z in 0..d.nz {
                f[d.index(x, y, z)] = line_out[z];
            }
        }
    }
    f
}

struct Scratch {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Scratch {
            v: vec![0; n],
            z: vec![0.0; n + 1],
        }
    }

    /// `out[q] = min_p f[p] + s2 (q - p)^2`, skipping infinite samples.
    fn envelope(&mut self, f: &[f64], s2: f64, out: &mut [f64]) {
        let n = f.len();
        let (v, z) = (&mut self.v, &mut self.z);
        let mut k: isize = -1;
        for q in 0..n {
            if f[q].is_infinite() {
                continue;
            }
            let fq = f[q] + s2 * (q * q) as f64;
            let mut s = f64::NEG_INFINITY;
            while k >= 0 {
                let p = v[k as usize];
                let fp = f[p] + s2 * (p * p) as f64;
                s = (fq - fp) / (2.0 * s2 * (q - p) as f64);
                if s <= z[k as usize] {
                    k -= 1;
                    s = f64::NEG_INFINITY;
                } else {
                    break;
                }
            }
            k += 1;
            let ku = k as usize;
            v[ku] = q;
            z[ku] = if ku == 0 { f64::NEG_INFINITY } else { s };
            z[ku + 1] = f64::INFINITY;
        }
        if k < 0 {
            out.fill(f64::INFINITY);
            return;
        }
        let mut j = 0usize;
        for (q, o) in out.iter_mut().enumerate() {
            while z[j + 1] < q as f64 {
                j += 1;
            }
            let p = v[j];
            let dq = q as f64 - p as f64;
            *o = s2 * dq * dq + f[p];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, Spacing};
    use proptest::prelude::*;

    #[test]
    fn single_pair_with_spacing() {
        let g = Grid::new(Dims::new(8, 2, 2), Spacing::new(2.0, 1.0, 1.0).unwrap()).unwrap();
        let a = g.dims.index(1, 0, 0);
        let b = g.dims.index(4, 0, 0);
        for m in [DistanceMethod::BruteForce, DistanceMethod::Transform] {
            assert_eq!(nearest_distances(&g, &[a], &[b], m).unwrap(), vec![6.0]);
        }
        assert!(nearest_distances(&g, &[a], &[], DistanceMethod::Auto).is_none());
    }

    proptest! {
        #[test]
        fn transform_matches_brute_force(
            nx in 1usize..9, ny in 1usize..9, nz in 1usize..9,
            sx in 0.3f64..3.0, sy in 0.3f64..3.0, sz in 0.3f64..3.0,
            seeds in proptest::collection::vec(any::<u32>(), 1..12),
        ) {
            let g = Grid::new(Dims::new(nx, ny, nz), Spacing::new(sx, sy, sz).unwrap()).unwrap();
            let n = g.len();
            let mut sites: Vec<usize> = seeds.iter().map(|s| *s as usize % n).collect();
            sites.sort_unstable();
            sites.dedup();
            let all: Vec<usize> = (0..n).collect();
            let brute = nearest_distances(&g, &all, &sites, DistanceMethod::BruteForce).unwrap();
            let fast = nearest_distances(&g, &all, &sites, DistanceMethod::Transform).unwrap();
            for (a, b) in brute.iter().zip(&fast) {
                prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
            }
        }
    }
}
