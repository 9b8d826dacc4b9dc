//! Command-line surface. Flags carry the library defaults; a flag only
//! overrides a `--config` file when it is given explicitly.

use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, Parser, Subcommand};
use lesionkit::distance::DistanceMethod;
use lesionkit::metrics::{HitRule, MetricConfig};
use lesionkit::optim::{OptimConfig, StepScale};
use lesionkit::{Connectivity, LossConfig, Objective};
use serde::de::DeserializeOwned;

#[derive(Debug, Parser)]
#[command(
    name = "lesionkit",
    version,
    about = "Component-adaptive losses, lesion-level metrics and synthetic phantoms for 3D lesion segmentation"
)]
pub struct Cli {
    /// Where to write the run record (resolved parameters). Defaults to the
    /// command's output directory, or the working directory.
    #[arg(long, global = true, value_name = "PATH")]
    pub run_json: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate seeded synthetic phantoms (image + ground-truth mask per case).
    Gen(GenArgs),
    /// Evaluate an objective on a probability volume against a ground truth.
    Loss(LossArgs),
    /// Compare analytic gradients with central finite differences.
    GradCheck(GradCheckArgs),
    /// Evaluate predicted masks against ground-truth masks, paired by file stem.
    Eval(EvalArgs),
    /// Remove connected components smaller than a minimum size.
    Postprocess(PostprocessArgs),
    /// Fit a logit field to one ground truth by gradient descent.
    Optimize(OptimizeArgs),
    /// Run several objectives over a phantom set and tabulate aggregated metrics.
    Compare(CompareArgs),
    /// Run catmil over a grid of (lambda_cat_final, lambda_mil) pairs.
    Sweep(SweepArgs),
}

/// Parses a snake_case enum name the same way config files do.
pub fn serde_name<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// True when `id` was given on the command line or through the environment.
pub fn explicit(m: &ArgMatches, id: &str) -> bool {
    matches!(
        m.value_source(id),
        Some(ValueSource::CommandLine | ValueSource::EnvVariable)
    )
}

macro_rules! override_if {
    ($m:expr, $($id:literal => $dst:expr, $val:expr;)*) => {
        $( if explicit($m, $id) { $dst = $val.clone(); } )*
    };
}

#[derive(Debug, Args)]
pub struct LossFlags {
    /// False-positive penalty α.
    #[arg(long, default_value_t = LossConfig::default().alpha)]
    pub alpha: f64,
    /// False-negative penalty β.
    #[arg(long, default_value_t = LossConfig::default().beta)]
    pub beta: f64,
    /// Size-adaptation exponent γ.
    #[arg(long, default_value_t = LossConfig::default().gamma)]
    pub gamma: f64,
    /// Tversky / Dice smoothing δ.
    #[arg(long, default_value_t = LossConfig::default().delta)]
    pub delta: f64,
    /// Stabilizer added to component sizes.
    #[arg(long, default_value_t = LossConfig::default().eps_weight)]
    pub eps_weight: f64,
    /// Background voxel weight.
    #[arg(long, default_value_t = LossConfig::default().w_bg)]
    pub w_bg: f64,
    /// MIL log stabilizer and cross-entropy clamp.
    #[arg(long, default_value_t = LossConfig::default().eps_mil)]
    pub eps_mil: f64,
    /// Final CAT weight after warm-up.
    #[arg(long, default_value_t = LossConfig::default().lambda_cat_final)]
    pub lambda_cat_final: f64,
    /// MIL weight.
    #[arg(long, default_value_t = LossConfig::default().lambda_mil)]
    pub lambda_mil: f64,
    /// CAT warm-up length in steps (optimization commands default to 10% of --steps).
    #[arg(long = "warmup-t", default_value_t = LossConfig::default().warmup_t)]
    pub warmup_t: u64,
    /// Ground-truth component connectivity (6, 18 or 26).
    #[arg(long, default_value_t = LossConfig::default().connectivity)]
    pub connectivity: Connectivity,
    /// Exponent of the focal Tversky baseline.
    #[arg(long, default_value_t = LossConfig::default().focal_exponent)]
    pub focal_exponent: f64,
}

impl LossFlags {
    pub fn apply(&self, m: &ArgMatches, c: &mut LossConfig) {
        override_if!(m,
            "alpha" => c.alpha, self.alpha;
            "beta" => c.beta, self.beta;
            "gamma" => c.gamma, self.gamma;
            "delta" => c.delta, self.delta;
            "eps_weight" => c.eps_weight, self.eps_weight;
            "w_bg" => c.w_bg, self.w_bg;
            "eps_mil" => c.eps_mil, self.eps_mil;
            "lambda_cat_final" => c.lambda_cat_final, self.lambda_cat_final;
            "lambda_mil" => c.lambda_mil, self.lambda_mil;
            "warmup_t" => c.warmup_t, self.warmup_t;
            "connectivity" => c.connectivity, self.connectivity;
            "focal_exponent" => c.focal_exponent, self.focal_exponent;
        );
    }
}

#[derive(Debug, Args)]
pub struct MetricFlags {
    /// Lesions with at most this many voxels count as small.
    #[arg(long, default_value_t = MetricConfig::default().small_lesion_tau)]
    pub small_lesion_tau: usize,
    /// Ascending upper edges of the lesion size bins (an open bin follows the last).
    #[arg(long, value_delimiter = ',', default_values_t = MetricConfig::default().size_bins)]
    pub size_bins: Vec<usize>,
    /// Lesion detection rule: any_overlap or center_in.
    #[arg(long, value_parser = serde_name::<HitRule>, default_value = "any_overlap")]
    pub hit_rule: HitRule,
    /// Lesion connectivity for evaluation (6, 18 or 26).
    #[arg(long, default_value_t = MetricConfig::default().connectivity)]
    pub metric_connectivity: Connectivity,
    /// Smoothing ε of the lesion-level ratios.
    #[arg(long, default_value_t = MetricConfig::default().eps_metric)]
    pub eps_metric: f64,
    /// False-positive voxels within this distance of the ground truth count as near.
    #[arg(long, default_value_t = MetricConfig::default().near_distance_mm)]
    pub near_distance_mm: f64,
    /// Distance computation: brute_force, transform or auto.
    #[arg(long, value_parser = serde_name::<DistanceMethod>, default_value = "auto")]
    pub distance_method: DistanceMethod,
}

impl MetricFlags {
    pub fn apply(&self, m: &ArgMatches, c: &mut MetricConfig) {
        override_if!(m,
            "small_lesion_tau" => c.small_lesion_tau, self.small_lesion_tau;
            "size_bins" => c.size_bins, self.size_bins;
            "hit_rule" => c.hit_rule, self.hit_rule;
            "metric_connectivity" => c.connectivity, self.metric_connectivity;
            "eps_metric" => c.eps_metric, self.eps_metric;
            "near_distance_mm" => c.near_distance_mm, self.near_distance_mm;
            "distance_method" => c.distance_method, self.distance_method;
        );
    }
}

#[derive(Debug, Args)]
pub struct OptimFlags {
    /// Gradient-descent steps.
    #[arg(long, default_value_t = OptimConfig::default().steps)]
    pub steps: u64,
    /// Learning rate.
    #[arg(long, default_value_t = OptimConfig::default().learning_rate)]
    pub learning_rate: f64,
    /// Initial logit of every voxel.
    #[arg(long, default_value_t = OptimConfig::default().init_logit, allow_negative_numbers = true)]
    pub init_logit: f64,
    /// Probability above which a voxel is predicted foreground.
    #[arg(long, default_value_t = OptimConfig::default().threshold)]
    pub threshold: f64,
    /// Record a trace entry every this many steps (and at the last step).
    #[arg(long, default_value_t = OptimConfig::default().record_every)]
    pub record_every: u64,
    /// Learning-rate unit: per_voxel (lr × voxel count × gradient) or raw.
    #[arg(long, value_parser = serde_name::<StepScale>, default_value = "per_voxel")]
    pub step_scale: StepScale,
}

impl OptimFlags {
    pub fn apply(&self, m: &ArgMatches, c: &mut OptimConfig) {
        override_if!(m,
            "steps" => c.steps, self.steps;
            "learning_rate" => c.learning_rate, self.learning_rate;
            "init_logit" => c.init_logit, self.init_logit;
            "threshold" => c.threshold, self.threshold;
            "record_every" => c.record_every, self.record_every;
            "step_scale" => c.step_scale, self.step_scale;
        );
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Phantom set spec (JSON). Without it the built-in benchmark set is used.
    #[arg(long, value_name = "JSON")]
    pub spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Base seed; case i uses seed + i. Overrides the spec.
    #[arg(long, env = "LESIONKIT_SEED")]
    pub seed: Option<u64>,
    /// Number of cases. Overrides the spec.
    #[arg(long)]
    pub cases: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Probability volume (.npy, values in [0, 1]).
    #[arg(long, value_name = "NPY")]
    pub pred: PathBuf,
    /// Ground-truth mask (.npy, values 0/1).
    #[arg(long, value_name = "NPY")]
    pub gt: PathBuf,
    /// Objective: dicece, tversky, focal_tversky, cat, mil or catmil.
    #[arg(long, default_value_t = Objective::Catmil)]
    pub objective: Objective,
    /// Optimization step, which sets the CAT warm-up weight.
    #[arg(long, default_value_t = 0)]
    pub step: u64,
    /// Loss configuration (JSON with LossConfig field names).
    #[arg(long, value_name = "JSON")]
    pub config: Option<PathBuf>,
    /// Write the gradient with respect to the probabilities here (.npy).
    #[arg(long, value_name = "NPY")]
    pub grad_out: Option<PathBuf>,
    #[command(flatten)]
    pub loss: LossFlags,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Objective to check, or `all`.
    #[arg(long, default_value = "catmil")]
    pub objective: String,
    /// Edge length of the random cubic instances.
    #[arg(long, default_value_t = 6)]
    pub dims: usize,
    /// Seed of the first instance; instance i uses seed + i.
    #[arg(long, env = "LESIONKIT_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Number of random instances.
    #[arg(long, default_value_t = 1)]
    pub instances: u64,
    /// Differentiate with respect to probabilities or logits.
    #[arg(long, value_parser = ["probability", "logit"], default_value = "probability")]
    pub space: String,
    /// Optimization step used for the CAT warm-up weight.
    #[arg(long, default_value_t = 10)]
    pub step: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = lesionkit::gradcheck::DEFAULT_STEP)]
    pub h: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Loss configuration (JSON with LossConfig field names).
    #[arg(long, value_name = "JSON")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub loss: LossFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted masks.
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    /// Directory of ground-truth masks.
    #[arg(long, value_name = "DIR")]
    pub gt: PathBuf,
    /// File-name suffix identifying predictions; the rest of the name is the case stem.
    #[arg(long, default_value = ".npy")]
    pub pred_suffix: String,
    /// File-name suffix identifying ground truths.
    #[arg(long, default_value = ".npy")]
    pub gt_suffix: String,
    /// Binarize predictions at this probability (strict >) instead of requiring 0/1 masks.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Metric configuration (JSON with MetricConfig field names).
    #[arg(long, value_name = "JSON")]
    pub config: Option<PathBuf>,
    /// Per-case report (CSV).
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    /// Also write the report as JSON.
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
    /// Cases evaluated in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub metrics: MetricFlags,
}

#[derive(Debug, Args)]
pub struct PostprocessArgs {
    /// Input mask (.npy).
    #[arg(long = "in", value_name = "NPY")]
    pub input: PathBuf,
    /// Output mask; defaults to `<input stem>.pp.npy` next to the input.
    #[arg(long, value_name = "NPY")]
    pub out: Option<PathBuf>,
    /// Smallest component size kept, in voxels.
    #[arg(long, default_value_t = 5)]
    pub min_size: usize,
    /// Component connectivity (6, 18 or 26).
    #[arg(long, default_value_t = Connectivity::TwentySix)]
    pub connectivity: Connectivity,
    /// Binarize the input at this probability (strict >) instead of requiring a 0/1 mask.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Also write the component label map of the output (int32 .npy).
    #[arg(long, value_name = "NPY")]
    pub labels_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Image volume (.npy); fixes the geometry.
    #[arg(long, value_name = "NPY")]
    pub image: PathBuf,
    /// Ground-truth mask (.npy).
    #[arg(long, value_name = "NPY")]
    pub gt: PathBuf,
    /// Output directory for prob.npy, pred.npy and trace.csv.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Also write the trace as JSON.
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
    /// Optimization configuration (JSON with OptimConfig field names).
    #[arg(long, value_name = "JSON")]
    pub config: Option<PathBuf>,
    /// Objective: dicece, tversky, focal_tversky, cat, mil or catmil.
    #[arg(long, default_value_t = OptimConfig::default().objective)]
    pub objective: Objective,
    #[command(flatten)]
    pub optim: OptimFlags,
    #[command(flatten)]
    pub loss: LossFlags,
    #[command(flatten)]
    pub metrics: MetricFlags,
}

#[derive(Debug, Args)]
pub struct PhantomSource {
    /// Directory of `<case>.img.npy` / `<case>.gt.npy` pairs. Without it the
    /// built-in benchmark set is generated.
    #[arg(long, value_name = "DIR")]
    pub phantoms: Option<PathBuf>,
    /// Phantom set spec (JSON) generated in memory instead of the benchmark set.
    #[arg(long, value_name = "JSON", conflicts_with = "phantoms")]
    pub spec: Option<PathBuf>,
    /// Base seed of generated phantoms.
    #[arg(long, env = "LESIONKIT_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub source: PhantomSource,
    /// Objectives to compare, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = Objective::ALL.to_vec())]
    pub objectives: Vec<Objective>,
    /// Aggregated table (CSV).
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    /// Also write the table as JSON.
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
    /// Also write every case's final report (CSV).
    #[arg(long, value_name = "CSV")]
    pub per_case: Option<PathBuf>,
    /// Runs executed in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Optimization configuration shared by all objectives (JSON with OptimConfig field names).
    #[arg(long, value_name = "JSON")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub optim: OptimFlags,
    #[command(flatten)]
    pub loss: LossFlags,
    #[command(flatten)]
    pub metrics: MetricFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub source: PhantomSource,
    /// Final CAT weights, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.2])]
    pub lambda_cats: Vec<f64>,
    /// MIL weights, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.2])]
    pub lambda_mils: Vec<f64>,
    /// Sweep table (CSV).
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    /// Also write the table as JSON.
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
    /// Runs executed in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Base optimization configuration (JSON with OptimConfig field names).
    #[arg(long, value_name = "JSON")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub optim: OptimFlags,
    #[command(flatten)]
    pub loss: LossFlags,
    #[command(flatten)]
    pub metrics: MetricFlags,
}
