//! Connected-component labeling of 3D binary masks.
//!
//! Labeling is a two-pass raster scan with a union-find over provisional
//! labels. Final ids are assigned in ascending order of each component's
//! smallest linear voxel index, so the output is fully deterministic.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::volume::{BinaryMask, Dims, Grid, Volume};

/// Voxel adjacency: faces (6), faces + edges (18), or faces + edges + corners (26).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn as_u8(self) -> u8 {
        match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }

    pub fn from_u8(n: u8) -> Option<Self> {
        match n {
            6 => Some(Connectivity::Six),
            18 => Some(Connectivity::Eighteen),
            26 => Some(Connectivity::TwentySix),
            _ => None,
        }
    }

    /// Whether two voxels at offset `(dx, dy, dz)` are neighbours.
    pub fn admits(self, d: (isize, isize, isize)) -> bool {
        let manhattan = d.0.unsigned_abs() + d.1.unsigned_abs() + d.2.unsigned_abs();
        let cheb =
            d.0.unsigned_abs()
                .max(d.1.unsigned_abs())
                .max(d.2.unsigned_abs());
        if cheb != 1 {
            return false;
        }
        match self {
            Connectivity::Six => manhattan == 1,
            Connectivity::Eighteen => manhattan <= 2,
            Connectivity::TwentySix => true,
        }
    }

    /// All neighbour offsets, in a fixed order.
    pub fn offsets(self) -> Vec<(isize, isize, isize)> {
        let mut out = Vec::with_capacity(26);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if self.admits((dx, dy, dz)) {
                        out.push((dx, dy, dz));
                    }
                }
            }
        }
        out
    }

    /// Offsets of neighbours already visited by an x-fastest raster scan.
    fn causal_offsets(self) -> Vec<(isize, isize, isize)> {
        self.offsets()
            .into_iter()
            .filter(|&(dx, dy, dz)| dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0))))
            .collect()
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

impl std::str::FromStr for Connectivity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse::<u8>()
            .ok()
            .and_then(Connectivity::from_u8)
            .ok_or_else(|| format!("connectivity must be 6, 18 or 26, got '{s}'"))
    }
}

impl Serialize for Connectivity {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Connectivity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let n = u8::deserialize(d)?;
        Connectivity::from_u8(n).ok_or_else(|| {
            serde::de::Error::custom(format!("connectivity must be 6, 18 or 26, got {n}"))
        })
    }
}

/// Axis-aligned voxel bounds, inclusive on both ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    /// 1-based id; 0 is reserved for background.
    pub id: u32,
    /// Linear indices, ascending.
    pub voxels: Vec<usize>,
    pub bbox: BoundingBox,
}

impl Component {
    pub fn size(&self) -> usize {
        self.voxels.len()
    }

    /// The member voxel closest to the component centroid (lowest index on ties).
    pub fn center_voxel(&self, grid: &Grid) -> usize {
        let n = self.voxels.len() as f64;
        let mut c = [0.0f64; 3];
        for &v in &self.voxels {
            let (x, y, z) = grid.dims.coords(v);
            c[0] += x as f64;
            c[1] += y as f64;
            c[2] += z as f64;
        }
        let c = c.map(|s| s / n);
        let [sx, sy, sz] = grid.spacing.0;
        let mut best = (f64::INFINITY, usize::MAX);
        for &v in &self.voxels {
            let (x, y, z) = grid.dims.coords(v);
            let d = ((x as f64 - c[0]) * sx).powi(2)
                + ((y as f64 - c[1]) * sy).powi(2)
                + ((z as f64 - c[2]) * sz).powi(2);
            if d < best.0 {
                best = (d, v);
            }
        }
        best.1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentLabeling {
    grid: Grid,
    labels: Vec<u32>,
    components: Vec<Component>,
}

impl ComponentLabeling {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Per-voxel component id, 0 for background.
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.components.iter().map(Component::size).collect()
    }

    pub fn component(&self, id: u32) -> Option<&Component> {
        (id as usize)
            .checked_sub(1)
            .and_then(|i| self.components.get(i))
    }

    /// Label map as a volume, suitable for saving with an integer element type.
    pub fn to_volume(&self) -> Volume {
        Volume::new(
            self.grid.dims,
            self.grid.spacing,
            self.labels.iter().map(|&l| f64::from(l)).collect(),
        )
        .expect("label map has the grid's length and finite values")
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new() -> Self {
        UnionFind { parent: Vec::new() }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let ra = self.find(a);
        let rb = self.find(b);
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentLabeling {
    let grid = *mask.grid();
    let dims = grid.dims;
    let causal = connectivity.causal_offsets();
    const NONE: u32 = u32::MAX;

    let mut provisional = vec![NONE; dims.len()];
    let mut uf = UnionFind::new();
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let i = dims.index(x, y, z);
                if !mask.is_set(i) {
                    continue;
                }
                let mut current = NONE;
                for &(dx, dy, dz) in &causal {
                    let (px, py, pz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if px < 0
                        || py < 0
                        || pz < 0
                        || px >= dims.nx as isize
                        || py >= dims.ny as isize
                    {
                        continue;
                    }
                    let j = dims.index(px as usize, py as usize, pz as usize);
                    let l = provisional[j];
                    if l == NONE {
                        continue;
                    }
                    current = if current == NONE {
                        l
                    } else {
                        uf.union(current, l)
                    };
                }
                provisional[i] = if current == NONE { uf.make() } else { current };
            }
        }
    }

    // Resolve roots to final ids in order of first appearance in the scan.
    let mut final_id = vec![0u32; uf.parent.len()];
    let mut labels = vec![0u32; dims.len()];
    let mut components: Vec<Component> = Vec::new();
    for (i, &p) in provisional.iter().enumerate() {
        if p == NONE {
            continue;
        }
        let root = uf.find(p) as usize;
        if final_id[root] == 0 {
            components.push(Component {
                id: components.len() as u32 + 1,
                voxels: Vec::new(),
                bbox: BoundingBox {
                    min: [usize::MAX; 3],
                    max: [0; 3],
                },
            });
            final_id[root] = components.len() as u32;
        }
        let id = final_id[root];
        labels[i] = id;
        let c = &mut components[id as usize - 1];
        c.voxels.push(i);
        let (x, y, z) = dims.coords(i);
        for (axis, v) in [x, y, z].into_iter().enumerate() {
            c.bbox.min[axis] = c.bbox.min[axis].min(v);
            c.bbox.max[axis] = c.bbox.max[axis].max(v);
        }
    }

    ComponentLabeling {
        grid,
        labels,
        components,
    }
}

/// Keeps only components with at least `min_size` voxels.
pub fn filter_small_components(
    mask: &BinaryMask,
    min_size: usize,
    connectivity: Connectivity,
) -> BinaryMask {
    let labeling = label_components(mask, connectivity);
    let mut out = BinaryMask::empty(mask.grid());
    for c in labeling
        .components()
        .iter()
        .filter(|c| c.size() >= min_size)
    {
        for &v in &c.voxels {
            out.set(v, true);
        }
    }
    out
}

/// Foreground voxels with at least one face neighbour that is background or
/// outside the grid. Ascending linear indices.
pub fn surface_voxels(mask: &BinaryMask) -> Vec<usize> {
    let dims: Dims = mask.dims();
    let faces = Connectivity::Six.offsets();
    mask.foreground()
        .filter(|&i| {
            faces
                .iter()
                .any(|&d| dims.offset(i, d).is_none_or(|j| !mask.is_set(j)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Spacing;

    fn mask_from(dims: Dims, on: &[(usize, usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::empty(&Grid::new(dims, Spacing::default()).unwrap());
        for &(x, y, z) in on {
            m.set(dims.index(x, y, z), true);
        }
        m
    }

    #[test]
    fn offsets_counts() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::Eighteen.offsets().len(), 18);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
        assert_eq!(Connectivity::TwentySix.causal_offsets().len(), 13);
        assert_eq!(Connectivity::Six.causal_offsets().len(), 3);
    }

    #[test]
    fn empty_mask_has_no_components() {
        let m = mask_from(Dims::cube(4), &[]);
        let l = label_components(&m, Connectivity::TwentySix);
        assert!(l.is_empty());
        assert!(l.labels().iter().all(|&x| x == 0));
    }

    #[test]
    fn corner_touching_voxels() {
        let m = mask_from(Dims::cube(3), &[(0, 0, 0), (1, 1, 1)]);
        assert_eq!(label_components(&m, Connectivity::TwentySix).len(), 1);
        assert_eq!(label_components(&m, Connectivity::Eighteen).len(), 2);
        assert_eq!(label_components(&m, Connectivity::Six).len(), 2);
        let edge = mask_from(Dims::cube(3), &[(0, 0, 0), (1, 1, 0)]);
        assert_eq!(label_components(&edge, Connectivity::Eighteen).len(), 1);
        assert_eq!(label_components(&edge, Connectivity::Six).len(), 2);
    }

    #[test]
    fn ids_follow_smallest_index() {
        // A U-shape whose arms merge late in the scan, plus a later blob.
        let m = mask_from(
            Dims::new(5, 3, 1),
            &[
                (0, 0, 0),
                (2, 0, 0),
                (0, 1, 0),
                (2, 1, 0),
                (0, 2, 0),
                (1, 2, 0),
                (2, 2, 0),
                (4, 0, 0),
            ],
        );
        let l = label_components(&m, Connectivity::Six);
        assert_eq!(l.len(), 2);
        assert_eq!(l.components()[0].voxels[0], 0);
        assert_eq!(l.components()[0].size(), 7);
        assert_eq!(l.components()[1].voxels, vec![4]);
        assert_eq!(l.labels()[4], 2);
        assert_eq!(
            l.components()[0].bbox,
            BoundingBox {
                min: [0, 0, 0],
                max: [2, 2, 0]
            }
        );
    }

    #[test]
    fn filter_keeps_large_components() {
        let mut on: Vec<_> = (0..3).map(|x| (x, 0, 0)).collect();
        on.extend((0..8).map(|x| (x, 4, 4)));
        let m = mask_from(Dims::new(8, 6, 6), &on);
        let f = filter_small_components(&m, 5, Connectivity::TwentySix);
        assert_eq!(f.count(), 8);
        assert!(!f.is_set(0));
        assert_eq!(filter_small_components(&m, 0, Connectivity::TwentySix), m);
        assert_eq!(filter_small_components(&m, 1, Connectivity::TwentySix), m);
        assert_eq!(filter_small_components(&f, 5, Connectivity::TwentySix), f);
    }

    #[test]
    fn surface_of_cube() {
        let on: Vec<_> = (0..27)
            .map(|i| (1 + i % 3, 1 + (i / 3) % 3, 1 + i / 9))
            .collect();
        let m = mask_from(Dims::cube(5), &on);
        let s = surface_voxels(&m);
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&Dims::cube(5).index(2, 2, 2)));
    }

    #[test]
    fn surface_edge_cases() {
        let single = mask_from(Dims::cube(3), &[(1, 1, 1)]);
        assert_eq!(surface_voxels(&single), vec![Dims::cube(3).index(1, 1, 1)]);
        assert!(surface_voxels(&mask_from(Dims::cube(3), &[])).is_empty());
        // Grid boundary counts as background: a full grid is all surface if thin.
        let full = BinaryMask::new(Dims::new(3, 3, 1), Spacing::default(), vec![true; 9]).unwrap();
        assert_eq!(surface_voxels(&full).len(), 9);
    }

    #[test]
    fn connectivity_parses() {
        assert_eq!(
            "18".parse::<Connectivity>().unwrap(),
            Connectivity::Eighteen
        );
        assert!("8".parse::<Connectivity>().is_err());
        assert_eq!(serde_json::to_string(&Connectivity::Six).unwrap(), "6");
        assert!(serde_json::from_str::<Connectivity>("4").is_err());
    }
}
