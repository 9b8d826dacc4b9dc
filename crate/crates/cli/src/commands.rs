//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::ArgMatches;
use lesionkit::gradcheck::{
    check_objective, check_objective_logits, random_instance, random_logits,
};
use lesionkit::losses::weighted_sum_with;
use lesionkit::metrics::{aggregate, MetricConfig};
use lesionkit::npy::{save_volume_as, ElementType};
use lesionkit::optim::{
    compare_objectives, comparison_table, default_warmup, optimize, sweep, sweep_table,
    OptimConfig, RunSummary,
};
use lesionkit::phantom::benchmark_set;
use lesionkit::table::Table;
use lesionkit::{
    binarize, evaluate_case, filter_small_components, label_components, load_mask, load_volume,
    save_mask, save_volume, BinaryMask, CaseReport, LossConfig, Objective, ProbabilityVolume,
    Target,
};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::args::{
    explicit, serde_name, Cli, Command, CompareArgs, EvalArgs, GenArgs, GradCheckArgs, LossArgs,
    LossFlags, MetricFlags, OptimFlags, OptimizeArgs, PostprocessArgs, SweepArgs,
};
use crate::support::{
    dir_of, ensure_dir, files_by_stem, generate_set, layered, load_phantoms, pair_by_stem,
    path_str, read_phantom_set, write_run_json,
};

pub fn run(cli: Cli, matches: &ArgMatches) -> Result<ExitCode> {
    let (_, m) = matches.subcommand().expect("subcommand is required");
    let run_json = cli.run_json.as_deref();
    match &cli.command {
        Command::Gen(a) => gen(a, m, run_json),
        Command::Loss(a) => loss(a, m, run_json),
        Command::GradCheck(a) => grad_check(a, m, run_json),
        Command::Eval(a) => eval(a, m, run_json),
        Command::Postprocess(a) => postprocess(a, run_json),
        Command::Optimize(a) => optimize_one(a, m, run_json),
        Command::Compare(a) => compare(a, m, run_json),
        Command::Sweep(a) => sweep_grid(a, m, run_json),
    }
}

fn resolve_loss(m: &ArgMatches, config: Option<&Path>, flags: &LossFlags) -> Result<LossConfig> {
    let (mut c, _): (LossConfig, Value) = layered(config)?;
    flags.apply(m, &mut c);
    c.validate()?;
    Ok(c)
}

fn resolve_metrics(
    m: &ArgMatches,
    config: Option<&Path>,
    flags: &MetricFlags,
) -> Result<MetricConfig> {
    let (mut c, _): (MetricConfig, Value) = layered(config)?;
    flags.apply(m, &mut c);
    c.validate()?;
    Ok(c)
}

/// defaults < file < explicit flags; the warm-up follows `steps` unless set.
fn resolve_optim(
    m: &ArgMatches,
    config: Option<&Path>,
    optim: &OptimFlags,
    loss: &LossFlags,
    metrics: &MetricFlags,
) -> Result<OptimConfig> {
    let (mut c, raw): (OptimConfig, Value) = layered(config)?;
    optim.apply(m, &mut c);
    loss.apply(m, &mut c.loss_cfg);
    metrics.apply(m, &mut c.metrics);
    if raw.pointer("/loss_cfg/warmup_T").is_none() && !explicit(m, "warmup_t") {
        c.loss_cfg.warmup_t = default_warmup(c.steps);
    }
    c.validate()?;
    Ok(c)
}

fn load_binary(path: &Path, threshold: Option<f64>) -> Result<BinaryMask> {
    let mask = match threshold {
        Some(t) => {
            if !(t.is_finite() && (0.0..1.0).contains(&t)) {
                bail!("threshold must be in [0, 1), got {t}");
            }
            binarize(&load_volume(path)?, t)
        }
        None => load_mask(path)?,
    };
    Ok(mask)
}

fn save_table(t: &Table, csv: &Path, json: Option<&Path>) -> Result<()> {
    t.save_csv(csv)?;
    if let Some(j) = json {
        t.save_json(j)?;
    }
    Ok(())
}

fn opt_path(p: Option<&Path>) -> Value {
    p.map_or(Value::Null, |p| Value::String(path_str(p)))
}

fn gen(a: &GenArgs, m: &ArgMatches, run_json: Option<&Path>) -> Result<ExitCode> {
    let mut set = match &a.spec {
        Some(p) => read_phantom_set(p)?,
        None => benchmark_set(0),
    };
    if explicit(m, "seed") {
        set.phantom.seed = a.seed.expect("explicit seed has a value");
    }
    if let Some(n) = a.cases {
        set.cases = n;
    }
    if set.cases == 0 {
        bail!("cases must be >= 1");
    }
    let phantoms = generate_set(&set)?;
    ensure_dir(&a.out_dir)?;
    let mut lesions = BTreeMap::new();
    for (name, p) in &phantoms {
        save_volume(&p.image, a.out_dir.join(format!("{name}.img.npy")))?;
        save_mask(&p.mask, a.out_dir.join(format!("{name}.gt.npy")))?;
        lesions.insert(name.clone(), serde_json::to_value(&p.lesions)?);
    }
    write_json(&a.out_dir.join("spec.json"), &serde_json::to_value(&set)?)?;
    write_json(
        &a.out_dir.join("lesions.json"),
        &serde_json::to_value(&lesions)?,
    )?;
    write_run_json(
        run_json,
        &a.out_dir,
        "gen",
        json!({
            "spec": opt_path(a.spec.as_deref()),
            "phantom_set": set,
            "out_dir": path_str(&a.out_dir),
        }),
    )?;
    println!("wrote {} cases to {}", phantoms.len(), a.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn loss(a: &LossArgs, m: &ArgMatches, run_json: Option<&Path>) -> Result<ExitCode> {
    let cfg = resolve_loss(m, a.config.as_deref(), &a.loss)?;
    let p = ProbabilityVolume::new(load_volume(&a.pred)?).context("prediction")?;
    let gt = load_mask(&a.gt)?;
    p.grid().ensure_same_geometry(gt.grid())?;
    let target = Target::new(&gt, &cfg);
    let (lc, lm) = a.objective.lambdas(&cfg, a.step);
    let (out, grad) = match a.objective {
        Objective::Cat | Objective::Mil | Objective::Catmil => {
            let b = weighted_sum_with(&p, &target, &cfg, lc, lm)?;
            let out = json!({
                "objective": a.objective.name(),
                "step": a.step,
                "value": b.total.value,
                "base": b.base,
                "cat": b.cat,
                "mil": b.mil,
                "lambda_cat": lc,
                "lambda_mil": lm,
            });
            (out, b.total.grad)
        }
        o => {
            let g = o.evaluate(&p, &target, &cfg, a.step)?;
            let out = json!({ "objective": o.name(), "step": a.step, "value": g.value });
            (out, g.grad)
        }
    };
    if let Some(path) = &a.grad_out {
        save_volume(&grad, path)?;
    }
    let default_dir = a
        .grad_out
        .as_deref()
        .map_or_else(|| PathBuf::from("."), dir_of);
    write_run_json(
        run_json,
        &default_dir,
        "loss",
        json!({
            "pred": path_str(&a.pred),
            "gt": path_str(&a.gt),
            "objective": a.objective.name(),
            "step": a.step,
            "loss_cfg": cfg,
            "grad_out": opt_path(a.grad_out.as_deref()),
            "result": out,
        }),
    )?;
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}

fn grad_check(a: &GradCheckArgs, m: &ArgMatches, run_json: Option<&Path>) -> Result<ExitCode> {
    let cfg = resolve_loss(m, a.config.as_deref(), &a.loss)?;
    let objectives: Vec<Objective> = if a.objective == "all" {
        Objective::ALL.to_vec()
    } else {
        vec![serde_name(&a.objective).map_err(|_| {
            anyhow::anyhow!(
                "unknown objective `{}` (expected dicece, tversky, focal_tversky, cat, mil, catmil or all)",
                a.objective
            )
        })?]
    };
    if a.dims == 0 || a.dims > 32 {
        bail!("dims must be in 1..=32, got {}", a.dims);
    }
    if a.instances == 0 {
        bail!("instances must be >= 1");
    }
    if !(a.h.is_finite() && a.h > 0.0 && a.h < 0.01) {
        bail!("h must be in (0, 0.01), got {}", a.h);
    }
    let logit = a.space == "logit";
    let mut results = Vec::new();
    let mut ok = true;
    for &o in &objectives {
        let (mut worst, mut checked, mut skipped) = (0.0_f64, 0, 0);
        for i in 0..a.instances {
            let seed = a.seed.wrapping_add(i);
            let r = if logit {
                let (z, gt) = random_logits(a.dims, seed);
                check_objective_logits(o, &z, &gt, &cfg, a.step, a.h)?
            } else {
                let (p, gt) = random_instance(a.dims, seed);
                check_objective(o, &p, &gt, &cfg, a.step, a.h)?
            };
            worst = worst.max(r.max_rel_error);
            checked += r.checked;
            skipped += r.skipped;
        }
        let pass = worst <= a.tolerance;
        ok &= pass;
        println!(
            "{:<14} max_rel_error={:.3e} checked={} skipped={} {}",
            o.name(),
            worst,
            checked,
            skipped,
            if pass { "PASS" } else { "FAIL" }
        );
        results.push(json!({
            "objective": o.name(),
            "max_rel_error": worst,
            "checked": checked,
            "skipped": skipped,
            "pass": pass,
        }));
    }
    write_run_json(
        run_json,
        Path::new("."),
        "grad-check",
        json!({
            "objectives": objectives.iter().map(|o| o.name()).collect::<Vec<_>>(),
            "dims": a.dims,
            "seed": a.seed,
            "instances": a.instances,
            "space": a.space,
            "step": a.step,
            "h": a.h,
            "tolerance": a.tolerance,
            "loss_cfg": cfg,
            "results": results,
        }),
    )?;
    if ok {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: gradient check exceeded tolerance {:e}", a.tolerance);
        Ok(ExitCode::from(1))
    }
}

fn eval(a: &EvalArgs, m: &ArgMatches, run_json: Option<&Path>) -> Result<ExitCode> {
    let cfg = resolve_metrics(m, a.config.as_deref(), &a.metrics)?;
    if a.jobs == 0 {
        bail!("jobs must be >= 1");
    }
    let preds = files_by_stem(&a.pred, &a.pred_suffix)?;
    let gts = files_by_stem(&a.gt, &a.gt_suffix)?;
    let pairs = pair_by_stem("predictions", preds, "ground truths", gts)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .context("cannot start worker threads")?;
    let reports: Vec<Result<(String, CaseReport)>> = pool.install(|| {
        pairs
            .par_iter()
            .map(|(stem, pred, gt)| {
                let p = load_binary(pred, a.threshold)?;
                let g = load_mask(gt)?;
                let r = evaluate_case(&p, &g, &cfg).with_context(|| format!("case {stem}"))?;
                Ok((stem.clone(), r))
            })
            .collect()
    });
    let cases = reports.into_iter().collect::<Result<Vec<_>>>()?;
    let table = Table::from_cases("case", &cases)?;
    table.save_csv(&a.out)?;
    if let Some(j) = &a.json {
        let reports: Vec<CaseReport> = cases.iter().map(|(_, r)| r.clone()).collect();
        let doc = json!({ "cases": table.to_json(), "summary": aggregate(&reports) });
        write_json(j, &doc)?;
    }
    write_run_json(
        run_json,
        &dir_of(&a.out),
        "eval",
        json!({
            "pred": path_str(&a.pred),
            "gt": path_str(&a.gt),
            "pred_suffix": a.pred_suffix,
            "gt_suffix": a.gt_suffix,
            "threshold": a.threshold,
            "metrics": cfg,
            "cases": cases.iter().map(|(s, _)| s.as_str()).collect::<Vec<_>>(),
            "out": path_str(&a.out),
            "json": opt_path(a.json.as_deref()),
        }),
    )?;
    println!("evaluated {} cases -> {}", cases.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

/// `<stem>.pp.npy` next to `input`.
fn default_pp_path(input: &Path) -> PathBuf {
    let name = input
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name.strip_suffix(".npy").unwrap_or(&name);
    dir_of(input).join(format!("{stem}.pp.npy"))
}

fn postprocess(a: &PostprocessArgs, run_json: Option<&Path>) -> Result<ExitCode> {
    let mask = load_binary(&a.input, a.threshold)?;
    let out = a.out.clone().unwrap_or_else(|| default_pp_path(&a.input));
    let before = label_components(&mask, a.connectivity);
    let filtered = filter_small_components(&mask, a.min_size, a.connectivity);
    save_mask(&filtered, &out)?;
    let after = label_components(&filtered, a.connectivity);
    if let Some(path) = &a.labels_out {
        save_volume_as(&after.to_volume(), path, ElementType::I32)?;
    }
    let removed = mask.count() - filtered.count();
    write_run_json(
        run_json,
        &dir_of(&out),
        "postprocess",
        json!({
            "in": path_str(&a.input),
            "out": path_str(&out),
            "min_size": a.min_size,
            "connectivity": a.connectivity,
            "threshold": a.threshold,
            "labels_out": opt_path(a.labels_out.as_deref()),
            "components_in": before.len(),
            "components_kept": after.len(),
            "voxels_removed": removed,
        }),
    )?;
    println!(
        "kept {} of {} components ({} voxels removed) -> {}",
        after.len(),
        before.len(),
        removed,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn optimize_one(a: &OptimizeArgs, m: &ArgMatches, run_json: Option<&Path>) -> Result<ExitCode> {
    let mut cfg = resolve_optim(m, a.config.as_deref(), &a.optim, &a.loss, &a.metrics)?;
    if explicit(m, "objective") {
        cfg.objective = a.objective;
    }
    let image = load_volume(&a.image)?;
    let gt = load_mask(&a.gt)?;
    image.grid().ensure_same_geometry(gt.grid())?;
    let (prob, trace) = optimize(&image, &gt, &cfg)?;
    ensure_dir(&a.out_dir)?;
    let pred = binarize(prob.volume(), cfg.threshold);
    save_volume(prob.volume(), a.out_dir.join("prob.npy"))?;
    save_mask(&pred, a.out_dir.join("pred.npy"))?;
    save_table(&trace.to_table()?, &a.out_dir.join("trace.csv"), None)?;
    if let Some(j) = &a.json {
        write_json(j, &serde_json::to_value(&trace)?)?;
    }
    write_run_json(
        run_json,
        &a.out_dir,
        "optimize",
        json!({
            "image": path_str(&a.image),
            "gt": path_str(&a.gt),
            "out_dir": path_str(&a.out_dir),
            "json": opt_path(a.json.as_deref()),
            "config": cfg,
        }),
    )?;
    let last = trace.last().expect("trace has a final entry");
    println!(
        "{}: {} steps, final loss {:.6}, dice {:.4}, lesion recall {:.4}",
        cfg.objective, cfg.steps, last.loss, last.report.dice, last.report.lesion_recall
    );
    Ok(ExitCode::SUCCESS)
}

fn check_jobs(jobs: usize) -> Result<()> {
    if jobs == 0 {
        bail!("jobs must be >= 1");
    }
    Ok(())
}

fn per_case_table(runs: &[RunSummary], names: &[String]) -> Result<Table> {
    let columns = runs
        .first()
        .and_then(|r| r.cases.first())
        .map(|c| c.fields().into_iter().map(|(n, _)| n).collect())
        .unwrap_or_default();
    let mut t = Table::new(vec!["objective".into(), "case".into()], columns);
    for r in runs {
        for (name, c) in names.iter().zip(&r.cases) {
            t.push(
                vec![r.label.clone(), name.clone()],
                c.fields().into_iter().map(|(_, v)| v).collect(),
            )?;
        }
    }
    Ok(t)
}

fn compare(a: &CompareArgs, m: &ArgMatches, run_json: Option<&Path>) -> Result<ExitCode> {
    check_jobs(a.jobs)?;
    let base = resolve_optim(m, a.config.as_deref(), &a.optim, &a.loss, &a.metrics)?;
    if a.objectives.is_empty() {
        bail!("no objectives given");
    }
    let (cases, source) = load_phantoms(&a.source, explicit(m, "seed"))?;
    let names: Vec<String> = cases.iter().map(|(n, _)| n.clone()).collect();
    let phantoms: Vec<_> = cases.into_iter().map(|(_, p)| p).collect();
    let configs: Vec<(String, OptimConfig)> = a
        .objectives
        .iter()
        .map(|&o| {
            let mut c = base.clone();
            c.objective = o;
            (o.name().to_string(), c)
        })
        .collect();
    let runs = compare_objectives(&phantoms, &configs, a.jobs)?;
    save_table(&comparison_table(&runs)?, &a.out, a.json.as_deref())?;
    if let Some(path) = &a.per_case {
        per_case_table(&runs, &names)?.save_csv(path)?;
    }
    let mut base_record = serde_json::to_value(&base)?;
    if let Some(o) = base_record.as_object_mut() {
        o.remove("objective");
    }
    write_run_json(
        run_json,
        &dir_of(&a.out),
        "compare",
        json!({
            "phantoms": source,
            "objectives": a.objectives.iter().map(|o| o.name()).collect::<Vec<_>>(),
            "config": base_record,
            "jobs": a.jobs,
            "out": path_str(&a.out),
            "json": opt_path(a.json.as_deref()),
            "per_case": opt_path(a.per_case.as_deref()),
        }),
    )?;
    print_runs(&runs);
    Ok(ExitCode::SUCCESS)
}

fn sweep_grid(a: &SweepArgs, m: &ArgMatches, run_json: Option<&Path>) -> Result<ExitCode> {
    check_jobs(a.jobs)?;
    let base = resolve_optim(m, a.config.as_deref(), &a.optim, &a.loss, &a.metrics)?;
    if a.lambda_cats.is_empty() || a.lambda_mils.is_empty() {
        bail!("the sweep grid is empty");
    }
    let (cases, source) = load_phantoms(&a.source, explicit(m, "seed"))?;
    let phantoms: Vec<_> = cases.into_iter().map(|(_, p)| p).collect();
    let runs = sweep(&phantoms, &base, &a.lambda_cats, &a.lambda_mils, a.jobs)?;
    save_table(&sweep_table(&runs)?, &a.out, a.json.as_deref())?;
    let mut base_record = serde_json::to_value(&base)?;
    if let Some(o) = base_record.as_object_mut() {
        o.insert("objective".into(), json!("catmil"));
    }
    write_run_json(
        run_json,
        &dir_of(&a.out),
        "sweep",
        json!({
            "phantoms": source,
            "lambda_cats": a.lambda_cats,
            "lambda_mils": a.lambda_mils,
            "config": base_record,
            "jobs": a.jobs,
            "out": path_str(&a.out),
            "json": opt_path(a.json.as_deref()),
        }),
    )?;
    print_runs(&runs);
    Ok(ExitCode::SUCCESS)
}

fn print_runs(runs: &[RunSummary]) {
    for r in runs {
        let mean = |name: &str| {
            r.summary
                .iter()
                .find(|s| s.name == name)
                .and_then(|s| s.mean)
                .map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
        };
        println!(
            "{:<48} dice={} lesion_recall={} lesion_f1={}",
            r.label,
            mean("dice"),
            mean("lesion_recall"),
            mean("lesion_f1")
        );
    }
}
