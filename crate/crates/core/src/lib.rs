//! Component-adaptive segmentation objectives, lesion-level evaluation and
//! synthetic phantoms for sparse 3D lesion segmentation.
//!
//! * [`volume`] and [`npy`]: dense 3D grids and their on-disk format.
//! * [`components`]: connected components, small-component removal, surfaces.
//! * [`losses`]: CAT, MIL, Dice + CE and their composition, with gradients.
//! * [`metrics`]: voxel-level, lesion-level and false-positive metrics.
//! * [`phantom`]: seeded synthetic volumes with controlled lesions.
//! * [`optim`]: direct logit optimization harness, comparisons and sweeps.
//! * [`gradcheck`]: finite-difference verification of loss gradients.
//! * [`table`]: CSV / JSON result tables.

pub mod components;
pub mod distance;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod npy;
pub mod optim;
pub mod phantom;
pub mod table;
pub mod volume;

pub use components::{
    filter_small_components, label_components, surface_voxels, ComponentLabeling, Connectivity,
};
pub use error::{Error, Result};
pub use losses::{LossConfig, LossValueGrad, Objective, Target};
pub use metrics::{evaluate_case, CaseReport, MetricConfig};
pub use npy::{load_mask, load_volume, save_mask, save_volume};
pub use optim::{optimize, OptimConfig, OptimTrace};
pub use phantom::{generate, Phantom, PhantomSpec};
pub use table::Table;
pub use volume::{binarize, BinaryMask, Dims, Grid, ProbabilityVolume, Spacing, Volume};
