//! Command-line entry points: `gen-data`, `run`, `sweep`, `prune`, `diagnose`.
//!
//! Every command writes into the output directory and is a pure function of
//! the config and seed, so reruns produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::angular::PredictionMode;
use crate::config::{load_config, RunConfig, SweepParam};
use crate::dataset::{longtail_counts, save_csv};
use crate::diagnostics::{hardness_accuracy, HardnessRecord, ProfileSeries};
use crate::error::{Error, Result};
use crate::framework::{run_experiment, EvalReport, ExperimentConfig, ExperimentResult, PosthocKind};
use crate::model::checkpoint_save;
use crate::numeric::{mean, sample_sd};
use crate::prune::{ensemble_protocol, pruning_curve, save_scores_csv, PruneDirection, PruneMetric, PrunePoint, PruneScoreTable};

#[derive(Debug, Parser)]
#[command(name = "angular-lt", version, about = "Long-tailed classification with angular prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML or JSON config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed (overrides `seed`, and `seeds` becomes this single seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for seed sweeps and ensembles.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub eval_mode: Option<PredictionMode>,
    /// `low` or `high`.
    #[arg(long, global = true)]
    pub prune_direction: Option<PruneDirection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write train/test CSVs and a manifest.
    GenData,
    /// Run one experiment.
    Run,
    /// Sweep `tau` or `s` over a grid and seeds.
    Sweep,
    /// Prune, retrain and report accuracy per metric and fraction.
    Prune,
    /// Export per-class profiles and the hardness/accuracy correlation.
    Diagnose,
}

/// Config with command-line overrides applied.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(mode) = cli.eval_mode {
        cfg.eval.mode = Some(mode);
    }
    if let Some(dir) = cli.prune_direction {
        cfg.prune.direction = dir;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses arguments, runs the command and maps errors to an exit code
/// (2 for config errors, 1 otherwise).
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config { .. }) {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let run = || match cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Run => cmd_run(&cfg),
        Command::Sweep => cmd_sweep(&cfg),
        Command::Prune => cmd_prune(&cfg),
        Command::Diagnose => cmd_diagnose(&cfg),
    };
    match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(&cfg.out_dir)
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    data: &'a crate::framework::DataConfig,
    expected_counts: Vec<usize>,
    train_counts: &'a [usize],
    test_counts: &'a [usize],
    train_file: &'a str,
    test_file: &'a str,
}

/// `train.csv`, `test.csv`, `manifest.json`.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let (train, test) = cfg.data.build(cfg.seed)?;
    save_csv(&train, &out.join("train.csv"))?;
    save_csv(&test, &out.join("test.csv"))?;
    let spec = cfg.data.synth_spec(cfg.seed);
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            seed: spec.seed,
            data: &cfg.data,
            expected_counts: longtail_counts(&spec.lt)?,
            train_counts: train.class_counts(),
            test_counts: test.class_counts(),
            train_file: "train.csv",
            test_file: "test.csv",
        },
    )?;
    log::info!("wrote {} train and {} test samples to {}", train.len(), test.len(), out.display());
    Ok(())
}

pub const METRICS_HEADER: &str = "label,mode,calibrated,overall,head,mid,tail";

fn metrics_csv(reports: &[&EvalReport]) -> String {
    let m = reports.first().map_or(0, |r| r.per_class.len());
    let mut s = String::from(METRICS_HEADER);
    for c in 0..m {
        write!(s, ",class_{c}").unwrap();
    }
    s.push('\n');
    for r in reports {
        write!(s, "{},{},{},{},{},{},{}", r.label, r.mode, r.calibrated, r.overall, opt(r.head), opt(r.mid), opt(r.tail)).unwrap();
        for a in &r.per_class {
            write!(s, ",{}", opt(*a)).unwrap();
        }
        s.push('\n');
    }
    s
}

fn write_profiles(dir: &Path, result: &ExperimentResult) -> Result<()> {
    let dir = dir.join("profiles");
    std::fs::create_dir_all(&dir)?;
    let d = &result.diagnostics;
    let mut series: Vec<(&str, &ProfileSeries)> = vec![
        ("weight_norm_stage1", &d.weight_norm_stage1),
        ("weight_norm_final", &d.weight_norm_final),
        ("mean_linear_logit", &d.mean_linear_logit),
        ("mean_angular_logit", &d.mean_angular_logit),
        ("mean_prob_angular", &d.mean_prob_angular),
    ];
    if let Some(p) = &d.mean_prob_calibrated {
        series.push(("mean_prob_calibrated", p));
    }
    for (name, s) in series {
        s.save_csv(&dir.join(format!("{name}.csv")))?;
    }
    Ok(())
}

fn write_run_bundle(out: &Path, outcome: &crate::framework::ExperimentOutcome) -> Result<()> {
    let r = &outcome.result;
    write_json(&out.join("results.json"), r)?;
    let reports: Vec<&EvalReport> = r.reports.iter().chain([&r.final_report]).collect();
    std::fs::write(out.join("metrics.csv"), metrics_csv(&reports))?;
    write_profiles(out, r)?;
    let meta = BTreeMap::from([("seed".to_string(), r.config.seed.to_string())]);
    checkpoint_save(&outcome.stage1_model, &meta, &out.join("stage1.ckpt"))?;
    checkpoint_save(&outcome.final_model, &meta, &out.join("final.ckpt"))?;
    if let Some(p) = &r.calibration {
        std::fs::write(out.join("calibration.txt"), p.to_sidecar())?;
    }
    Ok(())
}

/// `results.json`, `metrics.csv`, `profiles/*.csv`, checkpoints and the
/// calibration sidecar when post-hoc correction is enabled.
pub fn cmd_run(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let outcome = run_experiment(&cfg.experiment(cfg.seed))?;
    write_run_bundle(out, &outcome)?;
    log::info!("final accuracy {:.4}", outcome.result.final_report.overall);
    Ok(())
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        Summary {
            mean: mean(values),
            sd: sample_sd(values),
        }
    }

    fn of_opt(values: &[Option<f64>]) -> Option<Self> {
        values.iter().copied().collect::<Option<Vec<f64>>>().map(|v| Self::of(&v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub overall: Summary,
    pub head: Option<Summary>,
    pub mid: Option<Summary>,
    pub tail: Option<Summary>,
    pub per_seed: Vec<EvalReport>,
}

#[derive(Serialize)]
struct SweepBundle<'a> {
    config: &'a RunConfig,
    effective: ExperimentConfig,
    parameter: SweepParam,
    rows: &'a [SweepRow],
}

fn summarize(value: f64, reports: Vec<EvalReport>) -> SweepRow {
    let pick = |f: fn(&EvalReport) -> Option<f64>| reports.iter().map(f).collect::<Vec<_>>();
    SweepRow {
        value,
        overall: Summary::of(&reports.iter().map(|r| r.overall).collect::<Vec<_>>()),
        head: Summary::of_opt(&pick(|r| r.head)),
        mid: Summary::of_opt(&pick(|r| r.mid)),
        tail: Summary::of_opt(&pick(|r| r.tail)),
        per_seed: reports,
    }
}

fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut s = format!("{param},overall_mean,overall_sd,head_mean,head_sd,mid_mean,mid_sd,tail_mean,tail_sd\n");
    let two = |x: &Option<Summary>| match x {
        Some(v) => format!("{},{}", v.mean, v.sd),
        None => ",".to_string(),
    };
    for r in rows {
        writeln!(s, "{},{},{},{},{},{}", r.value, r.overall.mean, r.overall.sd, two(&r.head), two(&r.mid), two(&r.tail)).unwrap();
    }
    s
}

/// Final accuracy per grid point and seed. For `s` the model is trained once
/// per seed and only the correction strength varies; `s = 0` forces the
/// correction on so the baseline row goes through the same path.
pub fn sweep_rows(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let grid = cfg.sweep.effective_grid();
    let per_seed: Vec<Vec<EvalReport>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<EvalReport>> {
            let mut exp = cfg.experiment(seed);
            match cfg.sweep.parameter {
                SweepParam::S => {
                    exp.posthoc.kind = PosthocKind::Abs;
                    exp.posthoc.s = Some(0.0);
                    let (train, test) = exp.data.build(seed)?;
                    let resolved = exp.resolve(train.num_classes())?;
                    let groups = resolved.group_spec(train.num_classes())?;
                    let (_, model, _, _) = crate::framework::train_pipeline(&resolved, &train)?;
                    let base = crate::framework::fit_calibration(&model, &train, resolved.posthoc.form.expect("resolved"), 0.0)?;
                    grid.iter()
                        .map(|&s| {
                            let p = base.with_strength(s)?;
                            crate::framework::evaluate_labeled("final", &model, &test, PredictionMode::Angular, Some(&p), &groups)
                        })
                        .collect()
                }
                SweepParam::Tau => grid
                    .iter()
                    .map(|&tau| {
                        exp.stage2.tau = tau;
                        Ok(run_experiment(&exp)?.result.final_report)
                    })
                    .collect(),
            }
        })
        .collect::<Result<_>>()?;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(g, &value)| summarize(value, per_seed.iter().map(|r| r[g].clone()).collect()))
        .collect())
}

/// `results.json` and `metrics.csv` with one row per grid point.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let rows = sweep_rows(cfg)?;
    let exp = cfg.experiment(cfg.seeds[0]);
    let effective = exp.resolve(cfg.data.classes)?;
    write_json(
        &out.join("results.json"),
        &SweepBundle {
            config: cfg,
            effective,
            parameter: cfg.sweep.parameter,
            rows: &rows,
        },
    )?;
    std::fs::write(out.join("metrics.csv"), sweep_csv(cfg.sweep.parameter, &rows))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneRow {
    pub metric: PruneMetric,
    pub fraction: f64,
    pub overall: Summary,
    pub tail: Option<Summary>,
    pub kept_mean: f64,
}

#[derive(Serialize)]
struct PruneBundle<'a> {
    config: &'a RunConfig,
    rows: &'a [PruneRow],
    points: &'a [PrunePoint],
}

/// Points for every seed (in seed order) and the score tables of the
/// first seed.
pub fn prune_points(cfg: &RunConfig) -> Result<(Vec<PrunePoint>, Vec<PruneScoreTable>)> {
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| pruning_curve(&cfg.experiment(seed), &cfg.prune))
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::new();
    let mut tables = Vec::new();
    for (i, (p, t)) in per_seed.into_iter().enumerate() {
        points.extend(p);
        if i == 0 {
            tables = t;
        }
    }
    Ok((points, tables))
}

pub fn prune_rows(cfg: &RunConfig, points: &[PrunePoint]) -> Vec<PruneRow> {
    let mut rows = Vec::new();
    for &metric in &cfg.prune.metrics {
        for &fraction in &cfg.prune.fractions {
            let sel: Vec<&PrunePoint> = points.iter().filter(|p| p.metric == metric && p.fraction == fraction).collect();
            let kept: Vec<f64> = sel.iter().map(|p| p.kept as f64).collect();
            rows.push(PruneRow {
                metric,
                fraction,
                overall: Summary::of(&sel.iter().map(|p| p.overall).collect::<Vec<_>>()),
                tail: Summary::of_opt(&sel.iter().map(|p| p.tail).collect::<Vec<_>>()),
                kept_mean: mean(&kept),
            });
        }
    }
    rows
}

/// `results.json`, `metrics.csv` (one row per metric and fraction) and
/// `scores.csv` (score tables of the first seed).
pub fn cmd_prune(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let (points, tables) = prune_points(cfg)?;
    let rows = prune_rows(cfg, &points);
    write_json(
        &out.join("results.json"),
        &PruneBundle {
            config: cfg,
            rows: &rows,
            points: &points,
        },
    )?;
    let mut s = String::from("metric,fraction,overall_mean,overall_sd,tail_mean,tail_sd,kept_mean\n");
    for r in &rows {
        let (tm, ts) = r.tail.as_ref().map_or((String::new(), String::new()), |t| (t.mean.to_string(), t.sd.to_string()));
        writeln!(s, "{},{},{},{},{tm},{ts},{}", r.metric, r.fraction, r.overall.mean, r.overall.sd, r.kept_mean).unwrap();
    }
    std::fs::write(out.join("metrics.csv"), s)?;
    save_scores_csv(&tables.iter().collect::<Vec<_>>(), &out.join("scores.csv"))?;
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseBundle<'a> {
    result: &'a ExperimentResult,
    hardness: &'a HardnessRecord,
}

/// The `run` bundle plus `scores.csv` (ensemble AVH) and the
/// hardness/accuracy record in `results.json`.
pub fn cmd_diagnose(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let exp = cfg.experiment(cfg.seed);
    let (train, test) = exp.data.build(cfg.seed)?;
    let outcome = crate::framework::run_experiment_on(&exp, &train, &test)?;
    write_run_bundle(out, &outcome)?;
    let table = ensemble_protocol(PruneMetric::Avh, &train, &exp.model, &exp.stage1, &cfg.prune.ensemble, cfg.seed)?;
    let hardness = hardness_accuracy(&table, &outcome.result.final_report)?;
    if hardness.violations > 0 {
        log::warn!("{} consensus-correct samples exceed the 1/M hardness bound", hardness.violations);
    }
    write_json(
        &out.join("results.json"),
        &DiagnoseBundle {
            result: &outcome.result,
            hardness: &hardness,
        },
    )?;
    save_scores_csv(&[&table], &out.join("scores.csv"))?;
    Ok(())
}
