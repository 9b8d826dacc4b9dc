//! Segmentation objectives over probability volumes, each returning the loss
//! value together with its closed-form gradient with respect to the
//! per-voxel foreground probabilities.
//!
//! * component-adaptive Tversky (CAT): Tversky index over voxel contributions
//!   reweighted by `(|C_k| + eps)^-gamma` for ground-truth component `C_k`,
//! * lesion-level multiple-instance term (MIL): mean of `-log(max p + eps)`
//!   over ground-truth components,
//! * the Dice + cross-entropy base loss,
//! * their composition with a linear warm-up of the CAT weight,
//! * plain and focal Tversky baselines.
//!
//! Weights depend only on the ground truth and are treated as constants.
//! All reductions are sequential sums in linear voxel order, so results are
//! bit-reproducible.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::components::{label_components, ComponentLabeling, Connectivity};
use crate::error::{Error, Result};
use crate::volume::{BinaryMask, ProbabilityVolume, Volume};

/// Every hyperparameter of the objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// False-positive penalty.
    pub alpha: f64,
    /// False-negative penalty.
    pub beta: f64,
    /// Size-adaptation exponent.
    pub gamma: f64,
    /// Tversky / Dice smoothing.
    pub delta: f64,
    /// Stabilizer added to component sizes before exponentiation.
    pub eps_weight: f64,
    /// Background voxel weight.
    pub w_bg: f64,
    /// Log stabilizer for the MIL term; also the cross-entropy clamp.
    pub eps_mil: f64,
    pub lambda_cat_final: f64,
    pub lambda_mil: f64,
    /// Warm-up length of the CAT weight, in optimization steps.
    #[serde(rename = "warmup_T")]
    pub warmup_t: u64,
    pub connectivity: Connectivity,
    /// Exponent of the focal Tversky baseline.
    pub focal_exponent: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.3,
            beta: 0.7,
            gamma: 1.0,
            delta: 1e-6,
            eps_weight: 1e-6,
            w_bg: 1.0,
            eps_mil: 1e-6,
            lambda_cat_final: 0.1,
            lambda_mil: 0.1,
            warmup_t: 50,
            connectivity: Connectivity::TwentySix,
            focal_exponent: 4.0 / 3.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("w_bg", self.w_bg),
            ("lambda_cat_final", self.lambda_cat_final),
            ("lambda_mil", self.lambda_mil),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        let positive = [
            ("delta", self.delta),
            ("eps_weight", self.eps_weight),
            ("eps_mil", self.eps_mil),
            ("focal_exponent", self.focal_exponent),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        if self.eps_mil >= 0.5 {
            return Err(Error::InvalidConfig(format!(
                "eps_mil must be < 0.5 to leave a non-empty clamp band, got {}",
                self.eps_mil
            )));
        }
        if self.warmup_t < 1 {
            return Err(Error::InvalidConfig("warmup_T must be >= 1".into()));
        }
        Ok(())
    }

    /// CAT weight at `step`: `lambda_cat_final * min(step / T, 1)`.
    pub fn lambda_cat(&self, step: u64) -> f64 {
        if step >= self.warmup_t {
            self.lambda_cat_final
        } else {
            self.lambda_cat_final * (step as f64 / self.warmup_t as f64)
        }
    }
}

/// Scalar loss and its gradient with respect to each probability.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValueGrad {
    pub value: f64,
    pub grad: Volume,
}

impl LossValueGrad {
    fn new(value: f64, grad: Vec<f64>, like: &ProbabilityVolume) -> Self {
        LossValueGrad {
            value,
            grad: Volume::from_parts(*like.grid(), grad),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grad.data().iter().all(|g| g.is_finite())
    }
}

/// Per-voxel weights `w_i` of the component-adaptive term.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentWeights {
    pub weights: Volume,
}

/// Ground truth with its component decomposition and weights, computed once
/// and reused across evaluations against many predictions.
#[derive(Clone, Debug)]
pub struct Target {
    gt: BinaryMask,
    labeling: ComponentLabeling,
    weights: Vec<f64>,
}

impl Target {
    pub fn new(gt: &BinaryMask, cfg: &LossConfig) -> Self {
        let labeling = label_components(gt, cfg.connectivity);
        let weights = weights_for(gt, &labeling, cfg);
        Target {
            gt: gt.clone(),
            labeling,
            weights,
        }
    }

    pub fn gt(&self) -> &BinaryMask {
        &self.gt
    }

    pub fn labeling(&self) -> &ComponentLabeling {
        &self.labeling
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn check(&self, p: &ProbabilityVolume) -> Result<()> {
        p.grid().ensure_same_dims(self.gt.grid())
    }
}

fn weights_for(gt: &BinaryMask, labeling: &ComponentLabeling, cfg: &LossConfig) -> Vec<f64> {
    let per_component: Vec<f64> = labeling
        .components()
        .iter()
        .map(|c| (c.size() as f64 + cfg.eps_weight).powf(-cfg.gamma))
        .collect();
    labeling
        .labels()
        .iter()
        .zip(gt.data())
        .map(|(&l, &g)| {
            if g {
                per_component[l as usize - 1]
            } else {
                cfg.w_bg
            }
        })
        .collect()
}

/// `w_i = (|C_k| + eps)^-gamma` inside component `C_k`, `w_bg` elsewhere.
pub fn component_weights(gt: &BinaryMask, cfg: &LossConfig) -> ComponentWeights {
    let labeling = label_components(gt, cfg.connectivity);
    ComponentWeights {
        weights: Volume::from_parts(*gt.grid(), weights_for(gt, &labeling, cfg)),
    }
}

/// Weighted Tversky index and its gradient `dI/dp`.
fn tversky_index(
    p: &[f64],
    gt: &[bool],
    weight: impl Fn(usize) -> f64,
    alpha: f64,
    beta: f64,
    delta: f64,
) -> (f64, Vec<f64>) {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (i, (&pi, &gi)) in p.iter().zip(gt).enumerate() {
        let w = weight(i);
        if gi {
            tp += w * pi;
            fn_ += w * (1.0 - pi);
        } else {
            fp += w * pi;
        }
    }
    let num = tp + delta;
    let den = tp + alpha * fp + beta * fn_ + delta;
    let index = num / den;
    let den2 = den * den;
    let grad = p
        .iter()
        .zip(gt)
        .enumerate()
        .map(|(i, (_, &gi))| {
            let w = weight(i);
            if gi {
                // dNum = w, dDen = w (1 - beta)
                w * (den - num * (1.0 - beta)) / den2
            } else {
                // dNum = 0, dDen = alpha w
                -num * alpha * w / den2
            }
        })
        .collect();
    (index, grad)
}

/// Component-adaptive Tversky index alone (not the loss).
pub fn cat_index(p: &ProbabilityVolume, target: &Target, cfg: &LossConfig) -> Result<f64> {
    target.check(p)?;
    let w = target.weights();
    Ok(tversky_index(
        p.data(),
        target.gt.data(),
        |i| w[i],
        cfg.alpha,
        cfg.beta,
        cfg.delta,
    )
    .0)
}

pub fn cat_loss_with(
    p: &ProbabilityVolume,
    target: &Target,
    cfg: &LossConfig,
) -> Result<LossValueGrad> {
    target.check(p)?;
    let w = target.weights();
    let (index, d_index) = tversky_index(
        p.data(),
        target.gt.data(),
        |i| w[i],
        cfg.alpha,
        cfg.beta,
        cfg.delta,
    );
    Ok(LossValueGrad::new(
        1.0 - index,
        d_index.into_iter().map(|g| -g).collect(),
        p,
    ))
}

pub fn cat_loss(p: &ProbabilityVolume, gt: &BinaryMask, cfg: &LossConfig) -> Result<LossValueGrad> {
    p.grid().ensure_same_dims(gt.grid())?;
    cat_loss_with(p, &Target::new(gt, cfg), cfg)
}

/// Standard Tversky loss: the CAT loss with every weight equal to 1.
pub fn tversky_loss(
    p: &ProbabilityVolume,
    gt: &BinaryMask,
    cfg: &LossConfig,
) -> Result<LossValueGrad> {
    p.grid().ensure_same_dims(gt.grid())?;
    let (index, d_index) =
        tversky_index(p.data(), gt.data(), |_| 1.0, cfg.alpha, cfg.beta, cfg.delta);
    Ok(LossValueGrad::new(
        1.0 - index,
        d_index.into_iter().map(|g| -g).collect(),
        p,
    ))
}

/// `(1 - TI)^e` with uniform weights.
pub fn focal_tversky_loss(
    p: &ProbabilityVolume,
    gt: &BinaryMask,
    cfg: &LossConfig,
    focal_exponent: f64,
) -> Result<LossValueGrad> {
    p.grid().ensure_same_dims(gt.grid())?;
    if !(focal_exponent.is_finite() && focal_exponent > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "focal exponent must be finite and > 0, got {focal_exponent}"
        )));
    }
    let (index, d_index) =
        tversky_index(p.data(), gt.data(), |_| 1.0, cfg.alpha, cfg.beta, cfg.delta);
    let base = (1.0 - index).max(0.0);
    let value = base.powf(focal_exponent);
    // d/dp (1 - I)^e = -e (1 - I)^(e - 1) dI/dp; zero at the perfect-prediction point.
    let outer = if base > 0.0 {
        focal_exponent * base.powf(focal_exponent - 1.0)
    } else {
        0.0
    };
    Ok(LossValueGrad::new(
        value,
        d_index.into_iter().map(|g| -outer * g).collect(),
        p,
    ))
}

/// Detection score `s_k = max p` and its argmax (lowest index on ties) per component.
pub fn detection_scores(p: &ProbabilityVolume, labeling: &ComponentLabeling) -> Vec<(f64, usize)> {
    let data = p.data();
    labeling
        .components()
        .iter()
        .map(|c| {
            // Components are non-empty; seeding with the first voxel keeps the
            // argmax valid even when probabilities are NaN.
            let first = c.voxels[0];
            let mut best = (data[first], first);
            for &v in &c.voxels[1..] {
                if data[v] > best.0 {
                    best = (data[v], v);
                }
            }
            best
        })
        .collect()
}

pub fn mil_loss_with(
    p: &ProbabilityVolume,
    target: &Target,
    cfg: &LossConfig,
) -> Result<LossValueGrad> {
    target.check(p)?;
    let mut grad = vec![0.0; p.data().len()];
    let k = target.labeling.len();
    if k == 0 {
        return Ok(LossValueGrad::new(0.0, grad, p));
    }
    let kf = k as f64;
    let mut total = 0.0;
    for (s, argmax) in detection_scores(p, &target.labeling) {
        total += -(s + cfg.eps_mil).ln();
        grad[argmax] = -1.0 / (kf * (s + cfg.eps_mil));
    }
    Ok(LossValueGrad::new(total / kf, grad, p))
}

pub fn mil_loss(p: &ProbabilityVolume, gt: &BinaryMask, cfg: &LossConfig) -> Result<LossValueGrad> {
    p.grid().ensure_same_dims(gt.grid())?;
    mil_loss_with(p, &Target::new(gt, cfg), cfg)
}

/// Soft-Dice coefficient `(2 sum p g + delta) / (sum p + sum g + delta)`.
pub fn soft_dice_coefficient(p: &[f64], gt: &[bool], delta: f64) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&pi, &gi) in p.iter().zip(gt) {
        sp += pi;
        if gi {
            inter += pi;
            sg += 1.0;
        }
    }
    (2.0 * inter + delta) / (sp + sg + delta)
}

/// Soft-Dice loss plus mean binary cross-entropy.
pub fn base_loss(
    p: &ProbabilityVolume,
    gt: &BinaryMask,
    cfg: &LossConfig,
) -> Result<LossValueGrad> {
    p.grid().ensure_same_dims(gt.grid())?;
    let data = p.data();
    let gt = gt.data();
    let n = data.len() as f64;
    let eps = cfg.eps_mil;

    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    let mut ce = 0.0;
    for (&pi, &gi) in data.iter().zip(gt) {
        sp += pi;
        let q = pi.clamp(eps, 1.0 - eps);
        if gi {
            inter += pi;
            sg += 1.0;
            ce -= q.ln();
        } else {
            ce -= (1.0 - q).ln();
        }
    }
    let num = 2.0 * inter + cfg.delta;
    let den = sp + sg + cfg.delta;
    let dice_loss = 1.0 - num / den;
    let ce = ce / n;
    let den2 = den * den;

    let grad = data
        .iter()
        .zip(gt)
        .map(|(&pi, &gi)| {
            let d_num = if gi { 2.0 } else { 0.0 };
            let d_dice = -(d_num * den - num) / den2;
            let d_ce = if pi > eps && pi < 1.0 - eps {
                if gi {
                    -1.0 / (n * pi)
                } else {
                    1.0 / (n * (1.0 - pi))
                }
            } else {
                0.0
            };
            d_dice + d_ce
        })
        .collect();
    Ok(LossValueGrad::new(dice_loss + ce, grad, p))
}

/// Per-term breakdown of the composed objective.
#[derive(Clone, Debug, PartialEq)]
pub struct CatmilBreakdown {
    pub base: f64,
    pub cat: f64,
    pub mil: f64,
    pub lambda_cat: f64,
    pub lambda_mil: f64,
    pub total: LossValueGrad,
}

/// `base + lambda_cat(step) * CAT + lambda_mil * MIL`, with explicit weights.
pub fn weighted_sum_with(
    p: &ProbabilityVolume,
    target: &Target,
    cfg: &LossConfig,
    lambda_cat: f64,
    lambda_mil: f64,
) -> Result<CatmilBreakdown> {
    target.check(p)?;
    let base = base_loss(p, &target.gt, cfg)?;
    let cat = cat_loss_with(p, target, cfg)?;
    let mil = mil_loss_with(p, target, cfg)?;
    let value = base.value + lambda_cat * cat.value + lambda_mil * mil.value;
    let grad: Vec<f64> = base
        .grad
        .data()
        .iter()
        .zip(cat.grad.data())
        .zip(mil.grad.data())
        .map(|((b, c), m)| b + lambda_cat * c + lambda_mil * m)
        .collect();
    Ok(CatmilBreakdown {
        base: base.value,
        cat: cat.value,
        mil: mil.value,
        lambda_cat,
        lambda_mil,
        total: LossValueGrad::new(value, grad, p),
    })
}

pub fn catmil_loss_with(
    p: &ProbabilityVolume,
    target: &Target,
    cfg: &LossConfig,
    step: u64,
) -> Result<CatmilBreakdown> {
    weighted_sum_with(p, target, cfg, cfg.lambda_cat(step), cfg.lambda_mil)
}

pub fn catmil_loss(
    p: &ProbabilityVolume,
    gt: &BinaryMask,
    cfg: &LossConfig,
    step: u64,
) -> Result<LossValueGrad> {
    p.grid().ensure_same_dims(gt.grid())?;
    Ok(catmil_loss_with(p, &Target::new(gt, cfg), cfg, step)?.total)
}

/// Training objective selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Dice + cross-entropy.
    Dicece,
    Tversky,
    FocalTversky,
    /// Base loss plus the warmed-up CAT term.
    Cat,
    /// Base loss plus the MIL term.
    Mil,
    /// Base loss plus both auxiliary terms.
    Catmil,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::Dicece,
        Objective::Tversky,
        Objective::FocalTversky,
        Objective::Cat,
        Objective::Mil,
        Objective::Catmil,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Dicece => "dicece",
            Objective::Tversky => "tversky",
            Objective::FocalTversky => "focal_tversky",
            Objective::Cat => "cat",
            Objective::Mil => "mil",
            Objective::Catmil => "catmil",
        }
    }

    /// Weights of the CAT and MIL terms at `step` (zero where unused).
    pub fn lambdas(self, cfg: &LossConfig, step: u64) -> (f64, f64) {
        match self {
            Objective::Cat => (cfg.lambda_cat(step), 0.0),
            Objective::Mil => (0.0, cfg.lambda_mil),
            Objective::Catmil => (cfg.lambda_cat(step), cfg.lambda_mil),
            _ => (0.0, 0.0),
        }
    }

    pub fn evaluate(
        self,
        p: &ProbabilityVolume,
        target: &Target,
        cfg: &LossConfig,
        step: u64,
    ) -> Result<LossValueGrad> {
        match self {
            Objective::Dicece => base_loss(p, &target.gt, cfg),
            Objective::Tversky => tversky_loss(p, &target.gt, cfg),
            Objective::FocalTversky => focal_tversky_loss(p, &target.gt, cfg, cfg.focal_exponent),
            Objective::Cat | Objective::Mil | Objective::Catmil => {
                let (lc, lm) = self.lambdas(cfg, step);
                Ok(weighted_sum_with(p, target, cfg, lc, lm)?.total)
            }
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown objective '{s}' (expected one of: {})",
                    Objective::ALL.map(Objective::name).join(", ")
                )
            })
    }
}
