//! Central finite-difference verification of analytic loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{detection_scores, LossConfig, Objective, Target};
use crate::volume::{BinaryMask, Dims, Grid, ProbabilityVolume, Spacing, Volume};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Magnitude below which a gradient entry is compared in absolute terms.
///
/// Central differences with `h = 1e-6` on losses of order one carry a
/// rounding error of about `ε_mach·|L|/h ≈ 1e-10`; below this floor the
/// check therefore bounds the absolute error by `1e-5 · floor = 1e-9`.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares `analytic` with central differences of `f` around `x`.
pub fn check_gradient(
    x: &[f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
    h: f64,
    skip: impl Fn(usize) -> bool,
) -> GradCheckReport {
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
    };
    for i in 0..x.len() {
        if skip(i) {
            report.skipped += 1;
            continue;
        }
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_index = Some(i);
        }
    }
    report
}

/// Voxels whose perturbation by `h` could change a component's argmax.
pub fn mil_near_ties(p: &ProbabilityVolume, target: &Target, h: f64) -> Vec<bool> {
    let mut skip = vec![false; p.data().len()];
    let data = p.data();
    for (c, (s, _)) in target
        .labeling()
        .components()
        .iter()
        .zip(detection_scores(p, target.labeling()))
    {
        let close: Vec<usize> = c
            .voxels
            .iter()
            .copied()
            .filter(|&v| s - data[v] <= 2.0 * h)
            .collect();
        if close.len() > 1 {
            for v in close {
                skip[v] = true;
            }
        }
    }
    skip
}

fn uses_mil(objective: Objective, cfg: &LossConfig) -> bool {
    matches!(objective, Objective::Mil | Objective::Catmil) && cfg.lambda_mil > 0.0
}

/// Checks the gradient of `objective` with respect to the probabilities.
pub fn check_objective(
    objective: Objective,
    p: &ProbabilityVolume,
    gt: &BinaryMask,
    cfg: &LossConfig,
    step: u64,
    h: f64,
) -> Result<GradCheckReport> {
    let target = Target::new(gt, cfg);
    let analytic = objective.evaluate(p, &target, cfg, step)?;
    let skip = if uses_mil(objective, cfg) {
        mil_near_ties(p, &target, h)
    } else {
        vec![false; p.data().len()]
    };
    let grid = *p.grid();
    let eval = |x: &[f64]| {
        let q = ProbabilityVolume::new(Volume::from_parts(grid, x.to_vec()))
            .expect("probe stays inside [0, 1]");
        objective
            .evaluate(&q, &target, cfg, step)
            .expect("dims match")
            .value
    };
    Ok(check_gradient(
        p.data(),
        analytic.grad.data(),
        eval,
        h,
        |i| skip[i],
    ))
}

/// Checks the gradient of `objective ∘ sigmoid` with respect to logits.
pub fn check_objective_logits(
    objective: Objective,
    logits: &Volume,
    gt: &BinaryMask,
    cfg: &LossConfig,
    step: u64,
    h: f64,
) -> Result<GradCheckReport> {
    let target = Target::new(gt, cfg);
    let p = ProbabilityVolume::from_logits(logits);
    let g = objective.evaluate(&p, &target, cfg, step)?;
    let analytic: Vec<f64> = g
        .grad
        .data()
        .iter()
        .zip(p.data())
        .map(|(d, &pi)| d * pi * (1.0 - pi))
        .collect();
    let skip = if uses_mil(objective, cfg) {
        // Ties in probability space; a logit step h moves p by at most h / 4.
        mil_near_ties(&p, &target, h)
    } else {
        vec![false; p.data().len()]
    };
    let grid = *logits.grid();
    let eval = |z: &[f64]| {
        let q = ProbabilityVolume::from_logits(&Volume::from_parts(grid, z.to_vec()));
        objective
            .evaluate(&q, &target, cfg, step)
            .expect("dims match")
            .value
    };
    Ok(check_gradient(
        logits.data(),
        analytic.as_slice(),
        eval,
        h,
        |i| skip[i],
    ))
}

/// A random `(probabilities, ground truth)` pair on an `n³` grid.
///
/// Probabilities are uniform in [0.02, 0.98], away from the cross-entropy
/// clamp; ground truth is Bernoulli(0.3) per voxel.
pub fn random_instance(n: usize, seed: u64) -> (ProbabilityVolume, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid::new(Dims::cube(n), Spacing::default()).expect("n >= 1");
    let p: Vec<f64> = (0..grid.len())
        .map(|_| rng.random_range(0.02..0.98))
        .collect();
    let g: Vec<bool> = (0..grid.len()).map(|_| rng.random_bool(0.3)).collect();
    (
        ProbabilityVolume::new(Volume::from_parts(grid, p)).expect("in range"),
        BinaryMask::from_parts(grid, g),
    )
}

/// Logit counterpart of [`random_instance`].
pub fn random_logits(n: usize, seed: u64) -> (Volume, BinaryMask) {
    let (p, g) = random_instance(n, seed);
    let z = p.data().iter().map(|&x| (x / (1.0 - x)).ln()).collect();
    (Volume::from_parts(*p.grid(), z), g)
}
