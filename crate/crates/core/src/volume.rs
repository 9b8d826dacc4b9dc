//! Dense 3D grids with physical voxel spacing.
//!
//! All volumes store their samples in x-fastest linear order:
//! `index = x + nx * (y + ny * z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts along x, y and z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn as_tuple(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub const fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.nx;
        let rest = index / self.nx;
        (x, rest % self.ny, rest / self.ny)
    }

    /// Linear index of `(x, y, z) + (dx, dy, dz)`, or `None` outside the grid.
    #[inline]
    pub fn offset(&self, index: usize, d: (isize, isize, isize)) -> Option<usize> {
        let (x, y, z) = self.coords(index);
        let nx = x as isize + d.0;
        let ny = y as isize + d.1;
        let nz = z as isize + d.2;
        if nx < 0
            || ny < 0
            || nz < 0
            || nx >= self.nx as isize
            || ny >= self.ny as isize
            || nz >= self.nz as isize
        {
            return None;
        }
        Some(self.index(nx as usize, ny as usize, nz as usize))
    }

    fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::InvalidVolume(format!(
                "dims must be positive, got {:?}",
                self.as_tuple()
            )));
        }
        Ok(())
    }
}

/// Physical voxel size in millimetres along x, y and z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Default for Spacing {
    fn default() -> Self {
        Spacing::ISOTROPIC_1MM
    }
}

impl Spacing {
    pub const ISOTROPIC_1MM: Spacing = Spacing([1.0, 1.0, 1.0]);

    pub fn new(sx: f64, sy: f64, sz: f64) -> Result<Self> {
        let s = Spacing([sx, sy, sz]);
        s.validate()?;
        Ok(s)
    }

    pub fn voxel_volume(&self) -> f64 {
        self.0[0] * self.0[1] * self.0[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidVolume(format!(
                "spacing must be finite and positive, got {:?}",
                self.0
            )))
        }
    }
}

/// Shape and physical spacing shared by every volume kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: Dims,
    pub spacing: Spacing,
}

impl Grid {
    pub fn new(dims: Dims, spacing: Spacing) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        Ok(Grid { dims, spacing })
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn ensure_same_dims(&self, other: &Grid) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch {
                left: self.dims.as_tuple(),
                right: other.dims.as_tuple(),
            });
        }
        Ok(())
    }

    pub fn ensure_same_geometry(&self, other: &Grid) -> Result<()> {
        self.ensure_same_dims(other)?;
        if self.spacing != other.spacing {
            return Err(Error::SpacingMismatch {
                left: self.spacing.0,
                right: other.spacing.0,
            });
        }
        Ok(())
    }

    /// Squared Euclidean distance in mm² between two voxel centres.
    #[inline]
    pub fn dist2_mm(&self, a: usize, b: usize) -> f64 {
        let (ax, ay, az) = self.dims.coords(a);
        let (bx, by, bz) = self.dims.coords(b);
        let [sx, sy, sz] = self.spacing.0;
        let dx = (ax as f64 - bx as f64) * sx;
        let dy = (ay as f64 - by as f64) * sy;
        let dz = (az as f64 - bz as f64) * sz;
        dx * dx + dy * dy + dz * dz
    }
}

/// A dense scalar field: probabilities, logits, intensities or labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume {
    /// Builds a validated volume. Rejects length mismatches and NaN/Inf samples.
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        let grid = Grid::new(dims, spacing)?;
        if data.len() != dims.len() {
            return Err(Error::InvalidVolume(format!(
                "dimension mismatch: dims {:?} need {} samples, got {}",
                dims.as_tuple(),
                dims.len(),
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Volume { grid, data })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f64) -> Result<Self> {
        Volume::new(dims, spacing, vec![value; dims.len()])
    }

    pub fn zeros_like(grid: &Grid) -> Self {
        Volume {
            grid: *grid,
            data: vec![0.0; grid.len()],
        }
    }

    /// Skips validation; callers guarantee `data.len() == grid.len()` and finiteness.
    pub(crate) fn from_parts(grid: Grid, data: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        Volume { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.grid.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.dims.index(x, y, z)]
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        spacing.validate()?;
        self.grid.spacing = spacing;
        Ok(self)
    }
}

/// A {0, 1} mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    grid: Grid,
    data: Vec<bool>,
}

impl Eq for Grid {}

impl BinaryMask {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<bool>) -> Result<Self> {
        let grid = Grid::new(dims, spacing)?;
        if data.len() != dims.len() {
            return Err(Error::InvalidVolume(format!(
                "dimension mismatch: dims {:?} need {} samples, got {}",
                dims.as_tuple(),
                dims.len(),
                data.len()
            )));
        }
        Ok(BinaryMask { grid, data })
    }

    pub fn empty(grid: &Grid) -> Self {
        BinaryMask {
            grid: *grid,
            data: vec![false; grid.len()],
        }
    }

    /// Builds a mask from a volume whose samples are exactly 0 or 1.
    pub fn from_volume(v: &Volume) -> Result<Self> {
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                if x == 0.0 {
                    Ok(false)
                } else if x == 1.0 {
                    Ok(true)
                } else {
                    Err(Error::InvalidVolume(format!(
                        "mask value {x} at index {i} is neither 0 nor 1"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BinaryMask {
            grid: *v.grid(),
            data,
        })
    }

    pub(crate) fn from_parts(grid: Grid, data: Vec<bool>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        BinaryMask { grid, data }
    }

    pub fn to_volume(&self) -> Volume {
        Volume::from_parts(
            self.grid,
            self.data
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.grid.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn is_set(&self, index: usize) -> bool {
        self.data[index]
    }

    pub fn set(&mut self, index: usize, value: bool) {
        self.data[index] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_all_background(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Linear indices of foreground voxels in ascending order.
    pub fn foreground(&self) -> impl Iterator<Item = usize> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        spacing.validate()?;
        self.grid.spacing = spacing;
        Ok(self)
    }
}

/// A volume whose samples all lie in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume(Volume);

impl ProbabilityVolume {
    pub fn new(v: Volume) -> Result<Self> {
        if let Some((i, x)) = v
            .data()
            .iter()
            .enumerate()
            .find(|(_, x)| !(0.0..=1.0).contains(*x))
        {
            return Err(Error::InvalidVolume(format!(
                "probability {x} at index {i} outside [0, 1]"
            )));
        }
        Ok(ProbabilityVolume(v))
    }

    /// Element-wise logistic sigmoid of a logit volume.
    pub fn from_logits(logits: &Volume) -> Self {
        ProbabilityVolume(Volume::from_parts(
            *logits.grid(),
            logits.data().iter().map(|&z| sigmoid(z)).collect(),
        ))
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn grid(&self) -> &Grid {
        self.0.grid()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Voxel is foreground iff its value is strictly greater than `threshold`.
pub fn binarize(v: &Volume, threshold: f64) -> BinaryMask {
    BinaryMask::from_parts(*v.grid(), v.data().iter().map(|&x| x > threshold).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn binarize_is_strict() {
        let v = Volume::new(Dims::new(3, 1, 1), Spacing::default(), vec![0.2, 0.5, 0.9]).unwrap();
        assert_eq!(binarize(&v, 0.5).data(), &[false, false, true]);
    }

    #[test]
    fn binarize_all_zero() {
        let v = Volume::filled(Dims::cube(4), Spacing::default(), 0.0).unwrap();
        assert!(binarize(&v, 0.5).is_all_background());
    }

    #[test]
    fn rejects_bad_inputs() {
        let dims = Dims::new(2, 3, 4);
        assert!(Volume::new(dims, Spacing::default(), vec![0.0; 20]).is_err());
        assert!(matches!(
            Volume::new(dims, Spacing::default(), {
                let mut d = vec![0.0; 24];
                d[7] = f64::NAN;
                d
            }),
            Err(Error::NonFinite { index: 7 })
        ));
        assert!(Spacing::new(1.0, 0.0, 1.0).is_err());
        assert!(Spacing::new(1.0, f64::INFINITY, 1.0).is_err());
        assert!(Volume::new(Dims::new(0, 1, 1), Spacing::default(), vec![]).is_err());
    }

    #[test]
    fn probability_range_checked() {
        let v = Volume::new(Dims::new(2, 1, 1), Spacing::default(), vec![0.0, 1.5]).unwrap();
        assert!(ProbabilityVolume::new(v).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    proptest! {
        #[test]
        fn index_coords_bijection(nx in 1usize..7, ny in 1usize..7, nz in 1usize..7) {
            let d = Dims::new(nx, ny, nz);
            let mut seen = vec![false; d.len()];
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let i = d.index(x, y, z);
                        prop_assert!(i < d.len());
                        prop_assert!(!seen[i]);
                        seen[i] = true;
                        prop_assert_eq!(d.coords(i), (x, y, z));
                    }
                }
            }
        }

        #[test]
        fn binarize_matches_scalar_rule(data in proptest::collection::vec(-1.0f64..1.0, 27)) {
            let v = Volume::new(Dims::cube(3), Spacing::default(), data.clone()).unwrap();
            let m = binarize(&v, 0.0);
            for (i, x) in data.iter().enumerate() {
                prop_assert_eq!(m.is_set(i), *x > 0.0);
            }
        }

        #[test]
        fn binarize_idempotent_on_masks(bits in proptest::collection::vec(any::<bool>(), 64)) {
            let m = BinaryMask::new(Dims::cube(4), Spacing::default(), bits).unwrap();
            prop_assert_eq!(binarize(&m.to_volume(), 0.5), m);
        }
    }
}
