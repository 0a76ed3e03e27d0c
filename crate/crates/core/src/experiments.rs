//! Multi-run studies on top of [`crate::harness`]: learning-rate and
//! batch-size sweeps with correlation reports, the label-noise study, the
//! delayed-start study, the branching experiment, and metrics summarization.
//!
//! Independent runs execute in parallel; reports aggregate in config order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::harness::{best_test_and_trh, run_train, run_train_with_init, RunSummary, TrainResult};
use crate::metrics::{read_csv, MetricsRow};
use crate::reg::PenaltyKind;
use crate::rng::stream_seed;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    LearningRate,
    BatchSize,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::LearningRate => "learning_rate",
            SweepAxis::BatchSize => "batch_size",
        }
    }
}

/// One completed grid cell of a sweep.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub value: f64,
    pub seed: u64,
    pub summary: RunSummary,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub runs: Vec<SweepRun>,
    pub failures: Vec<(f64, u64, String)>,
    /// Pearson correlation of log(TrF_i) with test accuracy across runs.
    pub pearson_log_trfi_test: Option<f64>,
    /// Spearman rank correlation of TrF_i with test accuracy across runs.
    pub spearman_trfi_test: Option<f64>,
}

fn apply_axis(cfg: &mut ExperimentConfig, axis: SweepAxis, value: f64) -> Result<()> {
    match axis {
        SweepAxis::LearningRate => cfg.optim.lr = value,
        SweepAxis::BatchSize => {
            let b = value.round() as usize;
            if b == 0 {
                return Err(Error::InvalidArgument("batch size value must be >= 1".into()));
            }
            cfg.optim.batch_size = b;
        }
    }
    Ok(())
}

fn format_value(axis: SweepAxis, value: f64) -> String {
    match axis {
        SweepAxis::LearningRate => format!("{value}"),
        SweepAxis::BatchSize => format!("{}", value.round() as usize),
    }
}

/// Runs the `values x seeds` grid and correlates early-phase traces with
/// final test accuracy. Failed runs are listed, not fatal.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<SweepReport> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument("a sweep needs at least two axis values".into()));
    }
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument("a sweep needs at least two seeds".into()));
    }
    let grid: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let outcomes: Vec<(f64, u64, Result<TrainResult>)> = grid
        .par_iter()
        .map(|&(value, seed)| {
            let mut cfg = base.clone();
            let r = apply_axis(&mut cfg, axis, value).and_then(|()| {
                cfg.run.seed = seed;
                cfg.run.out = out_dir.join(format!("{}-{}-seed-{seed}", axis.name(), format_value(axis, value)));
                run_train(&cfg)
            });
            (value, seed, r)
        })
        .collect();

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (value, seed, outcome) in outcomes {
        match outcome {
            Ok(res) => runs.push(SweepRun { value, seed, summary: res.summary }),
            Err(e) => failures.push((value, seed, e.to_string())),
        }
    }
    let paired: Vec<(f64, f64)> = runs
        .iter()
        .filter_map(|r| Some((r.summary.trf_i?, r.summary.test_acc_at_best_val?)))
        .collect();
    let trfi: Vec<f64> = paired.iter().map(|p| p.0).collect();
    let log_trfi: Vec<f64> = paired.iter().map(|p| p.0.max(1e-300).ln()).collect();
    let test: Vec<f64> = paired.iter().map(|p| p.1).collect();
    let report = SweepReport {
        axis,
        runs,
        failures,
        pearson_log_trfi_test: stats::pearson(&log_trfi, &test),
        spearman_trfi_test: stats::spearman(&trfi, &test),
    };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("sweep_report.txt"), render_sweep(&report, values, seeds))?;
    Ok(report)
}

fn render_sweep(report: &SweepReport, values: &[f64], seeds: &[u64]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "sweep_axis: {}", report.axis.name());
    let _ = writeln!(s, "seeds: {}", seeds.len());
    let _ = writeln!(s, "{:<14} {:>12} {:>12} {:>14} {:>13}", "value", "mean_trf_i", "std_trf_i", "mean_test_acc", "std_test_acc");
    for &v in values {
        let group: Vec<&SweepRun> = report.runs.iter().filter(|r| r.value == v).collect();
        let trfi: Vec<f64> = group.iter().filter_map(|r| r.summary.trf_i).collect();
        let test: Vec<f64> = group.iter().filter_map(|r| r.summary.test_acc_at_best_val).collect();
        let _ = writeln!(
            s,
            "{:<14} {:>12.5} {:>12.5} {:>14.5} {:>13.5}",
            format_value(report.axis, v),
            stats::mean(&trfi),
            stats::sample_std(&trfi),
            stats::mean(&test),
            stats::sample_std(&test),
        );
    }
    let fmt_corr = |c: Option<f64>| c.map_or("undefined".to_string(), |x| format!("{x:.6}"));
    let _ = writeln!(s, "pearson_log_trf_i_vs_test_acc: {}", fmt_corr(report.pearson_log_trfi_test));
    let _ = writeln!(s, "spearman_trf_i_vs_test_acc: {}", fmt_corr(report.spearman_trfi_test));
    let _ = writeln!(s, "runs_failed: {}", report.failures.len());
    for (v, seed, err) in &report.failures {
        let _ = writeln!(s, "failure: value={v} seed={seed} error={err}");
    }
    s
}

/// One arm of the label-noise study.
#[derive(Debug, Clone)]
pub struct NoisyArm {
    pub label: String,
    pub alpha: f64,
    pub summary: RunSummary,
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone)]
pub struct NoisyReport {
    pub arms: Vec<NoisyArm>,
    /// Index of the arm with the best validation accuracy.
    pub best_arm: usize,
}

/// Runs the label-noise protocol: noise injected into the train split only,
/// per-epoch group statistics, and (optionally) a coefficient grid beside a
/// baseline arm. Model selection is test accuracy at the best validation
/// epoch.
pub fn run_noisy(
    base: &ExperimentConfig,
    fraction: f64,
    alphas: Option<&[f64]>,
    out_dir: &Path,
) -> Result<NoisyReport> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument("noise fraction must be in (0,1)".into()));
    }
    let mut noisy_base = base.clone();
    noisy_base.data.noise_fraction = fraction;

    let mut arm_cfgs: Vec<(String, f64, ExperimentConfig)> = Vec::new();
    match alphas {
        None => {
            let mut cfg = noisy_base.clone();
            cfg.run.out = out_dir.join("single");
            arm_cfgs.push(("single".into(), cfg.reg.alpha, cfg));
        }
        Some(grid) => {
            if !noisy_base.reg.kind.is_gradient_penalty() && noisy_base.reg.kind != PenaltyKind::Mixup {
                return Err(Error::InvalidArgument(
                    "an alpha grid needs a penalty or mixup regularizer".into(),
                ));
            }
            let mut baseline = noisy_base.clone();
            baseline.reg.kind = PenaltyKind::None;
            baseline.reg.alpha = 0.0;
            baseline.run.out = out_dir.join("baseline");
            arm_cfgs.push(("baseline".into(), 0.0, baseline));
            for &alpha in grid {
                let mut cfg = noisy_base.clone();
                if cfg.reg.kind == PenaltyKind::Mixup {
                    cfg.reg.mixup_beta = alpha;
                } else {
                    cfg.reg.alpha = alpha;
                }
                cfg.run.out = out_dir.join(format!("{}-alpha-{alpha}", cfg.reg.kind.name()));
                arm_cfgs.push((format!("{}-alpha-{alpha}", cfg.reg.kind.name()), alpha, cfg));
            }
        }
    }

    let results: Vec<(String, f64, Result<TrainResult>)> = arm_cfgs
        .par_iter()
        .map(|(label, alpha, cfg)| (label.clone(), *alpha, run_train(cfg)))
        .collect();
    let mut arms = Vec::new();
    for (label, alpha, outcome) in results {
        let res = outcome?;
        arms.push(NoisyArm { label, alpha, summary: res.summary, rows: res.rows });
    }
    let best_arm = arms
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            let va = best_val(a);
            let vb = best_val(b);
            va.partial_cmp(&vb).unwrap()
        })
        .map(|(i, _)| i)
        .unwrap_or(0);

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("noisy_report.txt"), render_noisy(&arms, best_arm, fraction))?;
    Ok(NoisyReport { arms, best_arm })
}

fn best_val(arm: &NoisyArm) -> f64 {
    arm.rows.iter().filter_map(|r| r.val_acc).fold(f64::NEG_INFINITY, f64::max)
}

fn render_noisy(arms: &[NoisyArm], best: usize, fraction: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "noise_fraction: {fraction}");
    let _ = writeln!(
        s,
        "{:<24} {:>8} {:>20} {:>16} {:>16}",
        "arm", "alpha", "test_at_best_val", "final_acc_clean", "final_acc_noisy"
    );
    for a in arms {
        let clean = a.rows.iter().filter_map(|r| r.train_acc_clean).last();
        let noisy = a.rows.iter().filter_map(|r| r.train_acc_noisy).last();
        let fmt = |v: Option<f64>| v.map_or("missing".to_string(), |x| format!("{x:.5}"));
        let _ = writeln!(
            s,
            "{:<24} {:>8} {:>20} {:>16} {:>16}",
            a.label,
            a.alpha,
            fmt(a.summary.test_acc_at_best_val),
            fmt(clean),
            fmt(noisy),
        );
    }
    let _ = writeln!(s, "best_arm: {}", arms[best].label);
    s
}

#[derive(Debug, Clone)]
pub struct DelayedStartReport {
    /// (start epoch, final test accuracy, test at best val, max tr_f)
    pub entries: Vec<(usize, Option<f64>, Option<f64>, Option<f64>)>,
}

/// One run per start epoch E; the penalty applies from epoch E onward.
pub fn run_delayed_start(
    base: &ExperimentConfig,
    starts: &[usize],
    out_dir: &Path,
) -> Result<DelayedStartReport> {
    if starts.is_empty() {
        return Err(Error::InvalidArgument("delayed-start needs at least one start epoch".into()));
    }
    if !base.reg.kind.is_gradient_penalty() {
        return Err(Error::InvalidArgument("delayed-start needs a gradient penalty kind".into()));
    }
    let results: Vec<(usize, Result<TrainResult>)> = starts
        .par_iter()
        .map(|&e| {
            let mut cfg = base.clone();
            cfg.reg.start_epoch = e;
            cfg.run.out = out_dir.join(format!("start-{e}"));
            (e, run_train(&cfg))
        })
        .collect();
    let mut entries = Vec::new();
    for (e, outcome) in results {
        let res = outcome?;
        let final_test = res.rows.iter().filter_map(|r| r.test_acc).last();
        entries.push((e, final_test, res.summary.test_acc_at_best_val, res.summary.max_tr_f));
    }
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>16} {:>20} {:>12}", "start_epoch", "final_test_acc", "test_at_best_val", "max_tr_f");
    for (e, ft, tb, mt) in &entries {
        let fmt = |v: &Option<f64>| v.map_or("missing".to_string(), |x| format!("{x:.5}"));
        let _ = writeln!(s, "{:<12} {:>16} {:>20} {:>12}", e, fmt(ft), fmt(tb), fmt(mt));
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("delayed_start_report.txt"), s)?;
    Ok(DelayedStartReport { entries })
}

/// Per-parent outcome of the branching experiment.
#[derive(Debug, Clone)]
pub struct BranchSide {
    pub label: String,
    /// tr_f probe at the branch point.
    pub parent_trf_i: Option<f64>,
    /// (best test accuracy, tr_h at the best-test epoch) per child.
    pub children: Vec<(f64, Option<f64>)>,
    pub median_best_test: f64,
    pub median_trh_f: f64,
}

#[derive(Debug, Clone)]
pub struct BranchReport {
    pub high: BranchSide,
    pub low: BranchSide,
}

/// Trains two parents to `branch_epoch`, then continues `n_branches`
/// children per parent from the parent's parameters, all under the low
/// configuration with fresh seeds.
pub fn run_branch(
    high: &ExperimentConfig,
    low: &ExperimentConfig,
    branch_epoch: usize,
    n_branches: usize,
    out_dir: &Path,
) -> Result<BranchReport> {
    if n_branches < 2 {
        return Err(Error::InvalidArgument("branching needs at least two children per parent".into()));
    }
    if branch_epoch == 0 {
        return Err(Error::InvalidArgument("branch epoch must be positive".into()));
    }
    let sides: Vec<(String, ExperimentConfig)> =
        vec![("high".into(), high.clone()), ("low".into(), low.clone())];
    let outcomes: Vec<Result<BranchSide>> = sides
        .par_iter()
        .map(|(label, parent_cfg)| {
            let mut pcfg = parent_cfg.clone();
            pcfg.optim.epochs = branch_epoch;
            pcfg.run.out = out_dir.join(format!("parent-{label}"));
            let parent = run_train(&pcfg)?;
            let parent_trf_i = parent.rows.iter().filter_map(|r| r.tr_f).last();

            let children: Vec<Result<(f64, Option<f64>)>> = (0..n_branches)
                .into_par_iter()
                .map(|i| {
                    let mut ccfg = low.clone();
                    ccfg.run.seed = stream_seed(parent_cfg.run.seed, "branch-child", i as u64);
                    ccfg.run.out = out_dir.join(format!("child-{label}-{i}"));
                    let child = run_train_with_init(&ccfg, Some(&parent.theta))?;
                    best_test_and_trh(&child.rows).ok_or_else(|| {
                        Error::InvalidArgument("child run recorded no test accuracy".into())
                    })
                })
                .collect();
            let mut pairs = Vec::with_capacity(n_branches);
            for c in children {
                pairs.push(c?);
            }
            let tests: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let trhs: Vec<f64> = pairs.iter().filter_map(|p| p.1).collect();
            Ok(BranchSide {
                label: label.clone(),
                parent_trf_i,
                children: pairs,
                median_best_test: stats::median(&tests),
                median_trh_f: stats::median(&trhs),
            })
        })
        .collect();
    let mut iter = outcomes.into_iter();
    let high_side = iter.next().unwrap()?;
    let low_side = iter.next().unwrap()?;
    let report = BranchReport { high: high_side, low: low_side };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("branch_report.txt"), render_branch(&report))?;
    Ok(report)
}

fn render_branch(report: &BranchReport) -> String {
    let mut s = String::new();
    for side in [&report.high, &report.low] {
        let _ = writeln!(
            s,
            "parent: {} trf_i_at_branch: {}",
            side.label,
            side.parent_trf_i.map_or("missing".to_string(), |v| format!("{v}"))
        );
        for (i, (test, trh)) in side.children.iter().enumerate() {
            let _ = writeln!(
                s,
                "child: {}-{i} best_test_acc: {test:.5} trh_at_best_test: {}",
                side.label,
                trh.map_or("missing".to_string(), |v| format!("{v}"))
            );
        }
        let _ = writeln!(s, "median_best_test[{}]: {:.5}", side.label, side.median_best_test);
        let _ = writeln!(s, "median_trh_f[{}]: {}", side.label, side.median_trh_f);
    }
    s
}

/// Per-file summaries plus the Pearson correlation between the tr_f and tr_h
/// probe series of each file.
pub fn summarize(paths: &[PathBuf], epsilon: f64) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("summarize needs at least one metrics file".into()));
    }
    let mut s = String::new();
    for path in paths {
        let rows = read_csv(path)?;
        let summary = RunSummary::from_rows(&rows, epsilon);
        s.push_str(&summary.render(&path.display().to_string()));
        let paired: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| Some((r.tr_f?, r.tr_h?)))
            .collect();
        let trf: Vec<f64> = paired.iter().map(|p| p.0).collect();
        let trh: Vec<f64> = paired.iter().map(|p| p.1).collect();
        match stats::pearson(&trf, &trh) {
            Some(c) => {
                let _ = writeln!(s, "pearson_tr_f_vs_tr_h: {c:.6}");
            }
            None => {
                let _ = writeln!(s, "pearson_tr_f_vs_tr_h: undefined");
            }
        }
        let _ = writeln!(s);
    }
    Ok(s)
}
