//! Voxel-level, lesion-level and error-analysis metrics for a predicted mask
//! against a ground-truth mask.
//!
//! Lesions are connected components. Undefined values (empty denominators
//! without smoothing, distances to an empty set) are `None` and serialize as
//! `null`; aggregation skips them and reports how many cases contributed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::components::{label_components, surface_voxels, ComponentLabeling, Connectivity};
use crate::distance::{nearest_distances, DistanceMethod};
use crate::error::{Error, Result};
use crate::volume::BinaryMask;

/// How a component counts as detected by the other mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitRule {
    /// At least one shared voxel.
    #[default]
    AnyOverlap,
    /// The component's centre voxel is foreground in the other mask.
    CenterIn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// Lesions with at most this many voxels count as small.
    pub small_lesion_tau: usize,
    /// Ascending upper edges (inclusive) of the size bins; a final open bin
    /// collects everything above the last edge.
    pub size_bins: Vec<usize>,
    pub hit_rule: HitRule,
    pub connectivity: Connectivity,
    pub eps_metric: f64,
    pub near_distance_mm: f64,
    pub distance_method: DistanceMethod,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            small_lesion_tau: 50,
            size_bins: vec![10, 50, 200],
            hit_rule: HitRule::AnyOverlap,
            connectivity: Connectivity::TwentySix,
            eps_metric: 1e-8,
            near_distance_mm: 2.0,
            distance_method: DistanceMethod::Auto,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size_bins.is_empty() {
            return Err(Error::InvalidConfig("size_bins must not be empty".into()));
        }
        if self.size_bins.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "size_bins must be strictly ascending, got {:?}",
                self.size_bins
            )));
        }
        if !(self.eps_metric.is_finite() && self.eps_metric > 0.0) {
            return Err(Error::InvalidConfig("eps_metric must be > 0".into()));
        }
        if !(self.near_distance_mm.is_finite() && self.near_distance_mm > 0.0) {
            return Err(Error::InvalidConfig("near_distance_mm must be > 0".into()));
        }
        Ok(())
    }

    /// Column label of each size bin, e.g. `le_10`, ..., `gt_200`.
    pub fn bin_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.size_bins.iter().map(|e| format!("le_{e}")).collect();
        if let Some(last) = self.size_bins.last() {
            labels.push(format!("gt_{last}"));
        }
        labels
    }

    fn bin_of(&self, size: usize) -> usize {
        self.size_bins
            .iter()
            .position(|&e| size <= e)
            .unwrap_or(self.size_bins.len())
    }
}

fn check_dims(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    pred.grid().ensure_same_dims(gt.grid())
}

/// `2|P ∩ G| / (|P| + |G|)`, defined as 1 when both masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_dims(pred, gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        np += p as usize;
        ng += g as usize;
        inter += (p && g) as usize;
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// Percentile with linear interpolation between order statistics.
/// `q` in [0, 100]. `None` on empty input.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(v[lo] + frac * (v[hi] - v[lo]))
}

fn directed_surface_distances(
    pred: &BinaryMask,
    gt: &BinaryMask,
    method: DistanceMethod,
) -> Option<(Vec<f64>, Vec<f64>)> {
    if pred.is_all_background() || gt.is_all_background() {
        return None;
    }
    let sp = surface_voxels(pred);
    let sg = surface_voxels(gt);
    let grid = pred.grid();
    Some((
        nearest_distances(grid, &sp, &sg, method)?,
        nearest_distances(grid, &sg, &sp, method)?,
    ))
}

/// Symmetric 95th-percentile surface distance in mm; `None` if either mask is empty.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    hd95_with(pred, gt, DistanceMethod::Auto)
}

pub fn hd95_with(
    pred: &BinaryMask,
    gt: &BinaryMask,
    method: DistanceMethod,
) -> Result<Option<f64>> {
    pred.grid().ensure_same_geometry(gt.grid())?;
    Ok(directed_surface_distances(pred, gt, method).map(|(a, b)| {
        percentile(&a, 95.0)
            .unwrap()
            .max(percentile(&b, 95.0).unwrap())
    }))
}

/// Classic Hausdorff distance (maximum surface distance) in mm.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    pred.grid().ensure_same_geometry(gt.grid())?;
    Ok(directed_surface_distances(pred, gt, DistanceMethod::Auto)
        .map(|(a, b)| a.iter().chain(&b).copied().fold(0.0, f64::max)))
}

/// Component decompositions of both masks with per-component hit flags.
#[derive(Clone, Debug)]
pub struct LesionMatch {
    pub gt_labeling: ComponentLabeling,
    pub pred_labeling: ComponentLabeling,
    /// `gt_hit[k]`: ground-truth component `k + 1` is detected.
    pub gt_hit: Vec<bool>,
    /// `pred_hit[k]`: predicted component `k + 1` overlaps the ground truth.
    pub pred_hit: Vec<bool>,
}

impl LesionMatch {
    pub fn gt_hits(&self) -> usize {
        self.gt_hit.iter().filter(|&&h| h).count()
    }

    pub fn pred_hits(&self) -> usize {
        self.pred_hit.iter().filter(|&&h| h).count()
    }
}

fn hit_flags(of: &ComponentLabeling, other: &BinaryMask, rule: HitRule) -> Vec<bool> {
    of.components()
        .iter()
        .map(|c| match rule {
            HitRule::AnyOverlap => c.voxels.iter().any(|&v| other.is_set(v)),
            HitRule::CenterIn => other.is_set(c.center_voxel(of.grid())),
        })
        .collect()
}

pub fn lesion_match(pred: &BinaryMask, gt: &BinaryMask, cfg: &MetricConfig) -> Result<LesionMatch> {
    check_dims(pred, gt)?;
    let gt_labeling = label_components(gt, cfg.connectivity);
    let pred_labeling = label_components(pred, cfg.connectivity);
    let gt_hit = hit_flags(&gt_labeling, pred, cfg.hit_rule);
    let pred_hit = hit_flags(&pred_labeling, gt, cfg.hit_rule);
    Ok(LesionMatch {
        gt_labeling,
        pred_labeling,
        gt_hit,
        pred_hit,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn lesion_scores(m: &LesionMatch, eps: f64) -> LesionScores {
    let precision = m.pred_hits() as f64 / (m.pred_hit.len() as f64 + eps);
    let recall = m.gt_hits() as f64 / (m.gt_hit.len() as f64 + eps);
    let f1 = 2.0 * precision * recall / (precision + recall + eps);
    LesionScores {
        precision,
        recall,
        f1,
    }
}

/// Lesion-wise precision, recall and F1 with ε-smoothed denominators.
pub fn lesion_f1(pred: &BinaryMask, gt: &BinaryMask, cfg: &MetricConfig) -> Result<LesionScores> {
    Ok(lesion_scores(&lesion_match(pred, gt, cfg)?, cfg.eps_metric))
}

fn small_recall(m: &LesionMatch, cfg: &MetricConfig) -> Option<f64> {
    let (mut small, mut hit) = (0usize, 0usize);
    for (c, &h) in m.gt_labeling.components().iter().zip(&m.gt_hit) {
        if c.size() <= cfg.small_lesion_tau {
            small += 1;
            hit += h as usize;
        }
    }
    (small > 0).then(|| hit as f64 / (small as f64 + cfg.eps_metric))
}

/// Detected fraction of ground-truth lesions with at most τ voxels.
pub fn small_lesion_recall(
    pred: &BinaryMask,
    gt: &BinaryMask,
    cfg: &MetricConfig,
) -> Result<Option<f64>> {
    Ok(small_recall(&lesion_match(pred, gt, cfg)?, cfg))
}

/// Hits and totals of ground-truth lesions per size bin.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeBinCount {
    pub label: String,
    pub lesions: usize,
    pub hits: usize,
}

impl SizeBinCount {
    pub fn recall(&self) -> Option<f64> {
        (self.lesions > 0).then(|| self.hits as f64 / self.lesions as f64)
    }
}

fn size_bins(m: &LesionMatch, cfg: &MetricConfig) -> Vec<SizeBinCount> {
    let mut bins: Vec<SizeBinCount> = cfg
        .bin_labels()
        .into_iter()
        .map(|label| SizeBinCount {
            label,
            lesions: 0,
            hits: 0,
        })
        .collect();
    for (c, &h) in m.gt_labeling.components().iter().zip(&m.gt_hit) {
        let b = &mut bins[cfg.bin_of(c.size())];
        b.lesions += 1;
        b.hits += h as usize;
    }
    bins
}

pub fn recall_by_size(
    pred: &BinaryMask,
    gt: &BinaryMask,
    cfg: &MetricConfig,
) -> Result<Vec<SizeBinCount>> {
    Ok(size_bins(&lesion_match(pred, gt, cfg)?, cfg))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorVolumes {
    pub fp_volume_mm3: f64,
    pub fn_volume_fraction: f64,
}

/// `|P \ G| * voxel volume` and `|G \ P| / (|G| + ε)`.
pub fn error_volumes(pred: &BinaryMask, gt: &BinaryMask, eps: f64) -> Result<ErrorVolumes> {
    pred.grid().ensure_same_geometry(gt.grid())?;
    let (mut fp, mut fn_, mut g) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(gt.data()) {
        fp += (p && !t) as usize;
        fn_ += (t && !p) as usize;
        g += t as usize;
    }
    Ok(ErrorVolumes {
        fp_volume_mm3: fp as f64 * pred.spacing().voxel_volume(),
        fn_volume_fraction: fn_ as f64 / (g as f64 + eps),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FpAnalysis {
    pub fp_blob_fraction: Option<f64>,
    pub fp_near_fraction: Option<f64>,
    pub fp_median_distance_mm: Option<f64>,
}

fn fp_analysis_inner(
    pred: &BinaryMask,
    gt: &BinaryMask,
    m: &LesionMatch,
    cfg: &MetricConfig,
) -> FpAnalysis {
    let n_pred = m.pred_hit.len();
    let fp_blob_fraction = (n_pred > 0).then(|| (n_pred - m.pred_hits()) as f64 / n_pred as f64);
    let fp_voxels: Vec<usize> = pred.foreground().filter(|&i| !gt.is_set(i)).collect();
    let gt_voxels: Vec<usize> = gt.foreground().collect();
    let distances = if fp_voxels.is_empty() {
        None
    } else {
        nearest_distances(pred.grid(), &fp_voxels, &gt_voxels, cfg.distance_method)
    };
    let (fp_near_fraction, fp_median_distance_mm) = match distances {
        Some(d) => {
            let near = d.iter().filter(|&&x| x <= cfg.near_distance_mm).count();
            (Some(near as f64 / d.len() as f64), percentile(&d, 50.0))
        }
        None => (None, None),
    };
    FpAnalysis {
        fp_blob_fraction,
        fp_near_fraction,
        fp_median_distance_mm,
    }
}

/// Share of predicted components without ground-truth overlap, and the
/// spatial distribution of false-positive voxels around the ground truth.
pub fn fp_analysis(pred: &BinaryMask, gt: &BinaryMask, cfg: &MetricConfig) -> Result<FpAnalysis> {
    let m = lesion_match(pred, gt, cfg)?;
    Ok(fp_analysis_inner(pred, gt, &m, cfg))
}

/// Every metric for one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub dice: f64,
    pub hd95_mm: Option<f64>,
    pub lesion_precision: f64,
    pub lesion_recall: f64,
    pub lesion_f1: f64,
    pub small_lesion_recall: Option<f64>,
    pub gt_lesion_count: usize,
    pub pred_lesion_count: usize,
    pub fn_lesion_count: usize,
    pub miss_rate: f64,
    pub fn_volume_fraction: f64,
    pub fp_volume_mm3: f64,
    pub fp_blob_fraction: Option<f64>,
    pub recall_by_size: Vec<SizeBinCount>,
    pub fp_near_fraction: Option<f64>,
    pub fp_median_distance_mm: Option<f64>,
}

impl CaseReport {
    /// Flat `(column, value)` view in a stable order; `None` marks undefined values.
    pub fn fields(&self) -> Vec<(String, Option<f64>)> {
        let mut out = vec![
            ("dice".to_string(), Some(self.dice)),
            ("hd95_mm".to_string(), self.hd95_mm),
            ("lesion_precision".to_string(), Some(self.lesion_precision)),
            ("lesion_recall".to_string(), Some(self.lesion_recall)),
            ("lesion_f1".to_string(), Some(self.lesion_f1)),
            ("small_lesion_recall".to_string(), self.small_lesion_recall),
            (
                "gt_lesion_count".to_string(),
                Some(self.gt_lesion_count as f64),
            ),
            (
                "pred_lesion_count".to_string(),
                Some(self.pred_lesion_count as f64),
            ),
            (
                "fn_lesion_count".to_string(),
                Some(self.fn_lesion_count as f64),
            ),
            ("miss_rate".to_string(), Some(self.miss_rate)),
            (
                "fn_volume_fraction".to_string(),
                Some(self.fn_volume_fraction),
            ),
            ("fp_volume_mm3".to_string(), Some(self.fp_volume_mm3)),
            ("fp_blob_fraction".to_string(), self.fp_blob_fraction),
        ];
        out.extend(
            self.recall_by_size
                .iter()
                .map(|b| (format!("recall_{}", b.label), b.recall())),
        );
        out.push(("fp_near_fraction".to_string(), self.fp_near_fraction));
        out.push((
            "fp_median_distance_mm".to_string(),
            self.fp_median_distance_mm,
        ));
        out
    }
}

pub fn evaluate_case(pred: &BinaryMask, gt: &BinaryMask, cfg: &MetricConfig) -> Result<CaseReport> {
    cfg.validate()?;
    pred.grid().ensure_same_geometry(gt.grid())?;
    let m = lesion_match(pred, gt, cfg)?;
    let scores = lesion_scores(&m, cfg.eps_metric);
    let volumes = error_volumes(pred, gt, cfg.eps_metric)?;
    let fp = fp_analysis_inner(pred, gt, &m, cfg);
    Ok(CaseReport {
        dice: dice(pred, gt)?,
        hd95_mm: hd95_with(pred, gt, cfg.distance_method)?,
        lesion_precision: scores.precision,
        lesion_recall: scores.recall,
        lesion_f1: scores.f1,
        small_lesion_recall: small_recall(&m, cfg),
        gt_lesion_count: m.gt_hit.len(),
        pred_lesion_count: m.pred_hit.len(),
        fn_lesion_count: m.gt_hit.len() - m.gt_hits(),
        miss_rate: 1.0 - scores.recall,
        fn_volume_fraction: volumes.fn_volume_fraction,
        fp_volume_mm3: volumes.fp_volume_mm3,
        fp_blob_fraction: fp.fp_blob_fraction,
        recall_by_size: size_bins(&m, cfg),
        fp_near_fraction: fp.fp_near_fraction,
        fp_median_distance_mm: fp.fp_median_distance_mm,
    })
}

/// Mean and population standard deviation of one metric over the cases
/// where it is defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Cases contributing a defined value.
    pub count: usize,
}

/// Per-metric summary across cases, in column order. Each metric is reduced
/// over its values sorted ascending, so the result does not depend on the
/// order of `reports`.
pub fn aggregate(reports: &[CaseReport]) -> Vec<MetricSummary> {
    let mut columns: Vec<String> = Vec::new();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (name, v) in r.fields() {
            if !values.contains_key(&name) {
                columns.push(name.clone());
                values.insert(name.clone(), Vec::new());
            }
            if let Some(v) = v {
                values.get_mut(&name).unwrap().push(v);
            }
        }
    }
    columns
        .into_iter()
        .map(|name| {
            let mut v = values.remove(&name).unwrap_or_default();
            v.sort_by(f64::total_cmp);
            let count = v.len();
            let (mean, std) = if count == 0 {
                (None, None)
            } else {
                let mean = v.iter().sum::<f64>() / count as f64;
                let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
                dev.sort_by(f64::total_cmp);
                let var = dev.iter().sum::<f64>() / count as f64;
                (Some(mean), Some(var.sqrt()))
            };
            MetricSummary {
                name,
                mean,
                std,
                count,
            }
        })
        .collect()
}
