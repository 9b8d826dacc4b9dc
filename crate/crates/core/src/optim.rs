//! Direct logit optimization: a free per-voxel logit field, pushed through a
//! sigmoid, is fitted to a ground-truth mask by plain gradient descent under
//! one of the objectives. With no model in between, differences between runs
//! come from the objective alone.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    base_loss, cat_loss_with, detection_scores, mil_loss_with, LossConfig, LossValueGrad,
    Objective, Target,
};
use crate::metrics::{aggregate, evaluate_case, CaseReport, MetricConfig, MetricSummary};
use crate::phantom::Phantom;
use crate::table::Table;
use crate::volume::{binarize, BinaryMask, ProbabilityVolume, Volume};

/// How the learning rate relates to the raw loss gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepScale {
    /// `z -= lr * dL/dz`.
    Raw,
    /// `z -= lr * |Ω| * dL/dz`: the mean-reduced losses spread a gradient of
    /// order `1/|Ω|` over each voxel, so this keeps `lr` independent of grid size.
    #[default]
    PerVoxel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub objective: Objective,
    pub steps: u64,
    pub learning_rate: f64,
    pub init_logit: f64,
    pub loss_cfg: LossConfig,
    /// Probability above which a voxel counts as predicted foreground.
    pub threshold: f64,
    pub record_every: u64,
    pub step_scale: StepScale,
    pub metrics: MetricConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            objective: Objective::Dicece,
            steps: 500,
            learning_rate: 1.0,
            init_logit: -2.0,
            loss_cfg: LossConfig::default(),
            threshold: 0.5,
            record_every: 10,
            step_scale: StepScale::PerVoxel,
            metrics: MetricConfig::default(),
        }
    }
}

/// Warm-up length used when none is given: 10% of the steps, at least one.
pub fn default_warmup(steps: u64) -> u64 {
    (steps / 10).max(1)
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !self.init_logit.is_finite() {
            return Err(Error::InvalidConfig("init_logit must be finite".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.record_every < 1 {
            return Err(Error::InvalidConfig("record_every must be >= 1".into()));
        }
        self.loss_cfg.validate()?;
        self.metrics.validate()
    }
}

/// State of one run at one recorded step, before that step's update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: u64,
    pub loss: f64,
    pub lambda_cat: f64,
    pub lambda_mil: f64,
    /// Highest probability inside each ground-truth component, in label order.
    pub detection_scores: Vec<f64>,
    /// Metrics of the thresholded prediction.
    pub report: CaseReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimTrace {
    pub entries: Vec<TraceEntry>,
}

impl OptimTrace {
    pub fn last(&self) -> Option<&TraceEntry> {
        self.entries.last()
    }

    /// One row per entry: schedule, loss, metrics, then `score_<k>` per component.
    pub fn to_table(&self) -> Result<Table> {
        let Some(first) = self.entries.first() else {
            return Ok(Table::new(vec!["step".into()], Vec::new()));
        };
        let k = first.detection_scores.len();
        let columns: Vec<String> = ["loss", "lambda_cat", "lambda_mil"]
            .into_iter()
            .map(String::from)
            .chain(first.report.fields().into_iter().map(|(n, _)| n))
            .chain((0..k).map(|i| format!("score_{i}")))
            .collect();
        let mut t = Table::new(vec!["step".into()], columns);
        for e in &self.entries {
            let values = [e.loss, e.lambda_cat, e.lambda_mil]
                .into_iter()
                .map(Some)
                .chain(e.report.fields().into_iter().map(|(_, v)| v))
                .chain(e.detection_scores.iter().map(|&s| Some(s)))
                .collect();
            t.push(vec![e.step.to_string()], values)?;
        }
        Ok(t)
    }
}

/// Names the first non-finite term of the objective, for diagnostics.
fn offending_term(
    objective: Objective,
    p: &ProbabilityVolume,
    target: &Target,
    cfg: &LossConfig,
) -> String {
    let finite = |r: Result<LossValueGrad>| r.map(|g| g.is_finite()).unwrap_or(false);
    if matches!(
        objective,
        Objective::Cat | Objective::Mil | Objective::Catmil
    ) {
        if !finite(base_loss(p, target.gt(), cfg)) {
            return "base".into();
        }
        if objective != Objective::Mil && !finite(cat_loss_with(p, target, cfg)) {
            return "cat".into();
        }
        if objective != Objective::Cat && !finite(mil_loss_with(p, target, cfg)) {
            return "mil".into();
        }
    }
    objective.name().into()
}

/// Fits `sigmoid(logits)` to `gt` from a constant `init_logit` start.
///
/// Entries are recorded at every multiple of `record_every` and at `steps`;
/// the entry at step `t` describes the state before update `t`, so the entry
/// at `steps` describes the returned probabilities. `image` only fixes the
/// geometry: the harness sees the data through the objective alone.
pub fn optimize(
    image: &Volume,
    gt: &BinaryMask,
    cfg: &OptimConfig,
) -> Result<(ProbabilityVolume, OptimTrace)> {
    cfg.validate()?;
    image.grid().ensure_same_geometry(gt.grid())?;
    let grid = *gt.grid();
    let target = Target::new(gt, &cfg.loss_cfg);
    let scale = match cfg.step_scale {
        StepScale::Raw => 1.0,
        StepScale::PerVoxel => grid.len() as f64,
    };
    let rate = cfg.learning_rate * scale;

    let mut logits = vec![cfg.init_logit; grid.len()];
    let mut trace = OptimTrace::default();
    let mut step = 0u64;
    loop {
        let p = ProbabilityVolume::from_logits(&Volume::from_parts(grid, logits.clone()));
        let g = cfg.objective.evaluate(&p, &target, &cfg.loss_cfg, step)?;
        if !g.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step as usize,
                term: offending_term(cfg.objective, &p, &target, &cfg.loss_cfg),
            });
        }
        if step.is_multiple_of(cfg.record_every) || step == cfg.steps {
            let (lambda_cat, lambda_mil) = cfg.objective.lambdas(&cfg.loss_cfg, step);
            let pred = binarize(p.volume(), cfg.threshold);
            trace.entries.push(TraceEntry {
                step,
                loss: g.value,
                lambda_cat,
                lambda_mil,
                detection_scores: detection_scores(&p, target.labeling())
                    .into_iter()
                    .map(|(s, _)| s)
                    .collect(),
                report: evaluate_case(&pred, gt, &cfg.metrics)?,
            });
        }
        if step == cfg.steps {
            return Ok((p, trace));
        }
        for ((z, d), &pi) in logits.iter_mut().zip(g.grad.data()).zip(p.data()) {
            *z -= rate * d * pi * (1.0 - pi);
        }
        step += 1;
    }
}

/// Aggregated outcome of one configuration over a phantom set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub config: OptimConfig,
    /// Final report of each phantom, in input order.
    pub cases: Vec<CaseReport>,
    pub summary: Vec<MetricSummary>,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start {jobs} worker threads: {e}")))
}

/// Runs every `(label, config)` on every phantom, with up to `jobs` runs in
/// parallel. Each run is sequential, so results do not depend on `jobs`.
pub fn compare_objectives(
    phantoms: &[Phantom],
    configs: &[(String, OptimConfig)],
    jobs: usize,
) -> Result<Vec<RunSummary>> {
    for (_, c) in configs {
        c.validate()?;
    }
    let tasks: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..phantoms.len()).map(move |p| (c, p)))
        .collect();
    let reports: Vec<Result<CaseReport>> = pool(jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|&(c, p)| {
                let ph = &phantoms[p];
                let (_, trace) = optimize(&ph.image, &ph.mask, &configs[c].1)?;
                Ok(trace.entries.last().expect("final entry").report.clone())
            })
            .collect()
    });
    let mut reports = reports.into_iter();
    configs
        .iter()
        .map(|(label, config)| {
            let cases = reports
                .by_ref()
                .take(phantoms.len())
                .collect::<Result<Vec<_>>>()?;
            Ok(RunSummary {
                label: label.clone(),
                config: config.clone(),
                summary: aggregate(&cases),
                cases,
            })
        })
        .collect()
}

/// `catmil` runs over the grid `lambda_cats × lambda_mils` (λ_CAT outer),
/// every other setting taken from `base`.
pub fn sweep(
    phantoms: &[Phantom],
    base: &OptimConfig,
    lambda_cats: &[f64],
    lambda_mils: &[f64],
    jobs: usize,
) -> Result<Vec<RunSummary>> {
    let configs: Vec<(String, OptimConfig)> = lambda_cats
        .iter()
        .flat_map(|&lc| lambda_mils.iter().map(move |&lm| (lc, lm)))
        .map(|(lc, lm)| {
            let mut c = base.clone();
            c.objective = Objective::Catmil;
            c.loss_cfg.lambda_cat_final = lc;
            c.loss_cfg.lambda_mil = lm;
            (
                format!("catmil(lambda_cat_final={lc:?},lambda_mil={lm:?})"),
                c,
            )
        })
        .collect();
    compare_objectives(phantoms, &configs, jobs)
}

/// One row per run keyed by label: metric means, then `<metric>_std`.
pub fn comparison_table(runs: &[RunSummary]) -> Result<Table> {
    let rows: Vec<(Vec<String>, Vec<MetricSummary>)> = runs
        .iter()
        .map(|r| (vec![r.label.clone()], r.summary.clone()))
        .collect();
    Table::from_summaries(vec!["objective".into()], &rows)
}

/// One row per run keyed by its `(lambda_cat_final, lambda_mil)` pair.
pub fn sweep_table(runs: &[RunSummary]) -> Result<Table> {
    let rows: Vec<(Vec<String>, Vec<MetricSummary>)> = runs
        .iter()
        .map(|r| {
            let l = &r.config.loss_cfg;
            (
                vec![
                    format!("{:?}", l.lambda_cat_final),
                    format!("{:?}", l.lambda_mil),
                ],
                r.summary.clone(),
            )
        })
        .collect();
    Table::from_summaries(vec!["lambda_cat_final".into(), "lambda_mil".into()], &rows)
}
