//! labcli: configured training runs with curvature probes, sweeps, the
//! label-noise study, the delayed-start study, the branching experiment, a
//! one-shot checkpoint probe, and metrics summarization.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fisherlab::curvature::{tr_f_mc, tr_h_hutchinson, FixedBatchOracle, HvpConfig};
use fisherlab::{
    load_checkpoint, prepare_data, run_branch, run_delayed_start, run_noisy, run_sweep, run_train,
    summarize, ExperimentConfig, Labels, SweepAxis,
};

#[derive(Parser)]
#[command(name = "labcli", about = "curvature-instrumented training laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Experiment config file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides run.out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides run.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Config overrides as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl CommonOpts {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects key=value, got {kv:?}"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.run.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// One configured training run with scheduled probes.
    Train {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Grid of runs over learning rate or batch size, with a correlation report.
    Sweep {
        #[command(flatten)]
        common: CommonOpts,
        /// Sweep axis.
        #[arg(long, value_parser = ["learning-rate", "batch-size"])]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Comma-separated master seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Label-noise study: noise injected into the train split only.
    Noisy {
        #[command(flatten)]
        common: CommonOpts,
        /// Fraction of train labels to corrupt, in (0,1).
        #[arg(long)]
        fraction: f64,
        /// Optional comma-separated coefficient grid (runs a baseline arm too).
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
    /// Two parents trained to a branch epoch, then children per parent.
    Branch {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value_t = 20)]
        branch_epoch: usize,
        #[arg(long, default_value_t = 8)]
        branches: usize,
        /// Overrides applied to the high-regularization parent; repeatable.
        #[arg(long = "high-set", value_name = "KEY=VALUE")]
        high_sets: Vec<String>,
        /// Overrides applied to the low-regularization parent; repeatable.
        #[arg(long = "low-set", value_name = "KEY=VALUE")]
        low_sets: Vec<String>,
    },
    /// One run per penalty start epoch.
    DelayedStart {
        #[command(flatten)]
        common: CommonOpts,
        /// Comma-separated start epochs, e.g. 1,2,4,8,16,32,64,128.
        #[arg(long, value_delimiter = ',')]
        starts: Vec<usize>,
    },
    /// One-shot curvature probe of a saved checkpoint.
    Probe {
        #[command(flatten)]
        common: CommonOpts,
        /// Checkpoint to probe.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Summaries and tr_f/tr_h correlation for metrics files.
    Summarize {
        /// Metrics CSV files.
        files: Vec<PathBuf>,
        /// Training-loss threshold for the early-phase trace.
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
    },
}

fn apply_sets(mut cfg: ExperimentConfig, sets: &[String]) -> Result<ExperimentConfig> {
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("expected key=value, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { common } => {
            let cfg = common.build()?;
            let result = run_train(&cfg)?;
            print!("{}", result.summary.render(&cfg.run.out.display().to_string()));
            println!("metrics: {}", cfg.run.out.join("metrics.csv").display());
        }
        Command::Sweep { common, axis, values, seeds } => {
            let cfg = common.build()?;
            let axis = match axis.as_str() {
                "learning-rate" => SweepAxis::LearningRate,
                "batch-size" => SweepAxis::BatchSize,
                other => bail!("unknown axis {other:?}"),
            };
            let out = cfg.run.out.clone();
            run_sweep(&cfg, axis, &values, &seeds, &out)?;
            let report = std::fs::read_to_string(out.join("sweep_report.txt"))?;
            print!("{report}");
        }
        Command::Noisy { common, fraction, alphas } => {
            let cfg = common.build()?;
            let out = cfg.run.out.clone();
            run_noisy(&cfg, fraction, alphas.as_deref(), &out)?;
            let report = std::fs::read_to_string(out.join("noisy_report.txt"))?;
            print!("{report}");
        }
        Command::Branch { common, branch_epoch, branches, high_sets, low_sets } => {
            let base = common.build()?;
            let high = apply_sets(base.clone(), &high_sets)?;
            let low = apply_sets(base.clone(), &low_sets)?;
            let out = base.run.out.clone();
            run_branch(&high, &low, branch_epoch, branches, &out)?;
            let report = std::fs::read_to_string(out.join("branch_report.txt"))?;
            print!("{report}");
        }
        Command::DelayedStart { common, starts } => {
            let cfg = common.build()?;
            let out = cfg.run.out.clone();
            run_delayed_start(&cfg, &starts, &out)?;
            let report = std::fs::read_to_string(out.join("delayed_start_report.txt"))?;
            print!("{report}");
        }
        Command::Probe { common, checkpoint } => {
            let cfg = common.build()?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let data = prepare_data(&cfg, cfg.run.seed)?;
            let spec = &ckpt.spec;
            let n = cfg.probe.trf_examples.min(data.train.len());
            let trf = tr_f_mc(
                spec,
                &ckpt.theta,
                &data.train.inputs,
                n,
                cfg.probe.trf_labels_per_example,
                cfg.run.seed,
            )?;
            println!("checkpoint: {}", checkpoint.display());
            println!("params: {}", ckpt.theta.len());
            println!("tr_f: {} (n={}, se={})", trf.value, trf.n_samples, trf.std_error);
            let bn = cfg.probe.batch.min(data.train.len());
            let idx: Vec<usize> = (0..bn).collect();
            let inputs = data.train.inputs.gather_rows(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
            let oracle = FixedBatchOracle::new(spec, &inputs, Labels::Hard(labels));
            let hvp = HvpConfig { relative_step: cfg.probe.hvp_step };
            let trh = tr_h_hutchinson(&oracle, &ckpt.theta, cfg.probe.hutchinson_m, cfg.run.seed, &hvp)?;
            println!("tr_h: {} (m={}, se={})", trh.value, trh.n_samples, trh.std_error);
        }
        Command::Summarize { files, epsilon } => {
            let text = summarize(&files, epsilon)?;
            print!("{text}");
        }
    }
    Ok(())
}
