//! Instrumented training runs: the SGD loop with scheduled curvature probes,
//! group-wise gradient statistics, metrics logging, and run summaries.

use std::fmt::Write as _;

use crate::autodiff::Labels;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::{DataSource, ExperimentConfig};
use crate::curvature::{
    empirical_fisher_trace, sample_indices, sampled_mean_gradient, tr_f_mc, tr_h_hutchinson,
    FixedBatchOracle, HvpConfig,
};
use crate::data::{batch_iter, gen_gaussians, gen_spirals, inject_label_noise, load_flds, load_idx, split, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{write_csv, MetricsRow};
use crate::nets::{forward_logits, init_params, predict_and_accuracy, InitScheme, ModelSpec};
use crate::optim::{lr_at, sgd_step, SgdState};
use crate::param::ParamVector;
use crate::reg::{regularized_step_grad, PenaltyCache, StepSeeds};
use crate::rng::{seeded_rng, stream, stream_seed};
use crate::stats;

/// Train/validation/test splits ready for a run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Builds the dataset named by the config, splits it, and injects label
/// noise into the train part (noise randomness comes from the master seed).
pub fn prepare_data(cfg: &ExperimentConfig, master: u64) -> Result<PreparedData> {
    let full = match &cfg.data.source {
        DataSource::Gaussians { classes, per_class, dim, separation } => {
            gen_gaussians(*classes, *per_class, *dim, *separation, cfg.data.gen_seed)?
        }
        DataSource::Spirals { classes, per_class, sigma } => {
            gen_spirals(*classes, *per_class, *sigma, cfg.data.gen_seed)?
        }
        DataSource::Idx { images, labels } => load_idx(images, labels)?,
        DataSource::Flds { path } => load_flds(path)?,
    };
    if full.classes != cfg.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model expects {}",
            full.classes, cfg.classes
        )));
    }
    let (mut train, val, test) = split(&full, cfg.data.split, cfg.data.split_seed)?;
    if cfg.data.noise_fraction > 0.0 {
        let (noisy, _) =
            inject_label_noise(&train, cfg.data.noise_fraction, stream_seed(master, stream::NOISE, 0))?;
        train = noisy;
    }
    Ok(PreparedData { train, val, test })
}

/// Loss/accuracy evaluation in fixed-size chunks, with per-group accuracies
/// when a noise mask is present.
pub struct EvalResult {
    pub loss: f64,
    pub acc: f64,
    pub acc_clean: Option<f64>,
    pub acc_noisy: Option<f64>,
}

pub fn evaluate(spec: &ModelSpec, theta: &ParamVector, data: &Dataset) -> Result<EvalResult> {
    let n = data.len();
    let chunk = 1024usize;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut group = data.noise_mask.as_ref().map(|_| (0usize, 0usize, 0usize, 0usize));
    let mut at = 0;
    while at < n {
        let hi = (at + chunk).min(n);
        let idx: Vec<usize> = (at..hi).collect();
        let inputs = data.inputs.gather_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let logits = forward_logits(spec, theta, &inputs)?;
        let (loss, _) = crate::nets::ce_loss_and_dlogits(logits.data(), spec.classes, &Labels::Hard(labels.clone()))?;
        loss_sum += loss * idx.len() as f64;
        let (preds, _) = predict_and_accuracy(&logits, &labels);
        for (pos, &i) in idx.iter().enumerate() {
            let ok = preds[pos] == labels[pos];
            correct += ok as usize;
            if let (Some(mask), Some(g)) = (data.noise_mask.as_ref(), group.as_mut()) {
                if mask[i] {
                    g.2 += 1;
                    g.3 += ok as usize;
                } else {
                    g.0 += 1;
                    g.1 += ok as usize;
                }
            }
        }
        at = hi;
    }
    let (acc_clean, acc_noisy) = match group {
        Some((nc, cc, nn, cn)) => (
            (nc > 0).then(|| cc as f64 / nc as f64),
            (nn > 0).then(|| cn as f64 / nn as f64),
        ),
        None => (None, None),
    };
    Ok(EvalResult { loss: loss_sum / n as f64, acc: correct as f64 / n as f64, acc_clean, acc_noisy })
}

/// Mean-gradient statistics of the clean and noisy groups under the labels
/// the model actually trains on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats {
    pub norm_clean: f64,
    pub norm_noisy: f64,
    pub ratio: f64,
    pub cosine: f64,
}

pub fn group_gradient_stats(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &Dataset,
    mask: &[bool],
    sample_cap: usize,
    seed: u64,
) -> Result<GroupStats> {
    let clean: Vec<usize> = (0..data.len()).filter(|&i| !mask[i]).collect();
    let noisy: Vec<usize> = (0..data.len()).filter(|&i| mask[i]).collect();
    if clean.is_empty() {
        return Err(Error::MaskDegenerate("clean"));
    }
    if noisy.is_empty() {
        return Err(Error::MaskDegenerate("noisy"));
    }
    let mut rng = seeded_rng(seed);
    let mut capped = |group: &[usize]| -> Vec<usize> {
        if group.len() <= sample_cap {
            group.to_vec()
        } else {
            let picks = sample_indices(group.len(), sample_cap, &mut rng);
            picks.into_iter().map(|p| group[p]).collect()
        }
    };
    let clean_idx = capped(&clean);
    let noisy_idx = capped(&noisy);
    let mean_grad = |idx: &[usize]| -> Result<ParamVector> {
        let inputs = data.inputs.gather_rows(idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let oracle = crate::autodiff::ModelOracle::new(spec, &inputs, Labels::Hard(labels));
        Ok(crate::autodiff::value_and_param_grad(&oracle, theta)?.1)
    };
    let gc = mean_grad(&clean_idx)?;
    let gn = mean_grad(&noisy_idx)?;
    let norm_clean = gc.l2_norm();
    let norm_noisy = gn.l2_norm();
    let ratio = if norm_clean > 0.0 { norm_noisy / norm_clean } else { f64::INFINITY };
    let cosine = stats::cosine(gc.data(), gn.data()).unwrap_or(0.0);
    Ok(GroupStats { norm_clean, norm_noisy, ratio, cosine })
}

/// Per-run scalar summary extracted from the metrics rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub trf_i: Option<f64>,
    pub max_tr_f: Option<f64>,
    pub best_val_epoch: Option<usize>,
    pub test_acc_at_best_val: Option<f64>,
    pub final_train_acc: Option<f64>,
    pub tr_h_at_best_val: Option<f64>,
}

/// How the early-phase trace extraction ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrfiOutcome {
    Value(f64),
    NeverCrossed,
    NoProbeBeforeCrossing,
}

/// The tr_f probe at the first logging point whose train loss reaches
/// `epsilon` (falling back to the latest probe before the crossing).
pub fn trfi_from_log(rows: &[MetricsRow], epsilon: f64) -> TrfiOutcome {
    let crossing = rows
        .iter()
        .position(|r| r.train_loss.is_some_and(|l| l <= epsilon));
    match crossing {
        None => TrfiOutcome::NeverCrossed,
        Some(at) => {
            for r in rows[..=at].iter().rev() {
                if let Some(v) = r.tr_f {
                    return TrfiOutcome::Value(v);
                }
            }
            TrfiOutcome::NoProbeBeforeCrossing
        }
    }
}

impl RunSummary {
    pub fn from_rows(rows: &[MetricsRow], epsilon: f64) -> Self {
        let trf_i = match trfi_from_log(rows, epsilon) {
            TrfiOutcome::Value(v) => Some(v),
            _ => None,
        };
        let max_tr_f = rows.iter().filter_map(|r| r.tr_f).fold(None, |m: Option<f64>, v| {
            Some(m.map_or(v, |x| x.max(v)))
        });
        let mut best: Option<(usize, f64)> = None;
        for r in rows {
            if let Some(va) = r.val_acc {
                if best.is_none_or(|(_, b)| va > b) {
                    best = Some((r.epoch, va));
                }
            }
        }
        let best_val_epoch = best.map(|(e, _)| e);
        let at_best = |get: &dyn Fn(&MetricsRow) -> Option<f64>| -> Option<f64> {
            let e = best_val_epoch?;
            rows.iter()
                .filter(|r| r.epoch <= e)
                .filter_map(|r| get(r))
                .last()
        };
        let test_acc_at_best_val = at_best(&|r| r.test_acc);
        let tr_h_at_best_val = at_best(&|r| r.tr_h);
        let final_train_acc = rows.iter().filter_map(|r| r.train_acc).last();
        Self { trf_i, max_tr_f, best_val_epoch, test_acc_at_best_val, final_train_acc, tr_h_at_best_val }
    }

    pub fn render(&self, name: &str) -> String {
        let opt = |v: Option<f64>| v.map_or("missing".to_string(), |x| format!("{x}"));
        let mut s = String::new();
        let _ = writeln!(s, "run: {name}");
        let _ = writeln!(s, "trf_i: {}", opt(self.trf_i));
        let _ = writeln!(s, "max_tr_f: {}", opt(self.max_tr_f));
        let _ = writeln!(
            s,
            "best_val_epoch: {}",
            self.best_val_epoch.map_or("missing".to_string(), |e| e.to_string())
        );
        let _ = writeln!(s, "test_acc_at_best_val: {}", opt(self.test_acc_at_best_val));
        let _ = writeln!(s, "final_train_acc: {}", opt(self.final_train_acc));
        let _ = writeln!(s, "tr_h_at_best_val: {}", opt(self.tr_h_at_best_val));
        s
    }
}

/// Everything a finished run leaves behind in memory.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
    pub theta: ParamVector,
    pub velocity: ParamVector,
    pub spec: ModelSpec,
}

/// Best test accuracy along the trajectory and the Hessian-trace probe at
/// that epoch (the branch experiment's per-child record).
pub fn best_test_and_trh(rows: &[MetricsRow]) -> Option<(f64, Option<f64>)> {
    let mut best: Option<(usize, f64)> = None;
    for r in rows {
        if let Some(ta) = r.test_acc {
            if best.is_none_or(|(_, b)| ta > b) {
                best = Some((r.epoch, ta));
            }
        }
    }
    let (epoch, acc) = best?;
    let trh = rows.iter().filter(|r| r.epoch == epoch).filter_map(|r| r.tr_h).last();
    Some((acc, trh))
}

/// Runs the configured training loop, writing metrics.csv, summary.txt,
/// config.txt, and checkpoint.flck into the config's output directory.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainResult> {
    run_train_with_init(cfg, None)
}

/// As [`run_train`], but optionally starting from an existing parameter
/// vector instead of a fresh initialization.
pub fn run_train_with_init(cfg: &ExperimentConfig, init: Option<&ParamVector>) -> Result<TrainResult> {
    cfg.validate()?;
    let spec = cfg.model_spec()?;
    let master = cfg.run.seed;
    let data = prepare_data(cfg, master)?;
    let n_train = data.train.len();
    if cfg.optim.batch_size > n_train {
        return Err(Error::Config(format!(
            "batch size {} exceeds train split size {n_train}",
            cfg.optim.batch_size
        )));
    }

    let mut theta = match init {
        Some(t) => {
            if t.layout().total_len() != spec.layout().total_len() || **t.layout() != *spec.layout() {
                return Err(Error::LayoutMismatch("initial parameters do not match the model".into()));
            }
            t.clone()
        }
        None => init_params(&spec, InitScheme::HeNormal, stream_seed(master, stream::INIT, 0)),
    };
    let mut sgd = SgdState::new(&theta, cfg.optim.momentum, cfg.optim.weight_decay)?;
    let schedule = cfg.optim.schedule();
    let hvp = HvpConfig { relative_step: cfg.probe.hvp_step };
    let shuffle_seed = stream_seed(master, stream::SHUFFLE, 0);
    let mut cache = PenaltyCache::empty();
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut step = 0usize;
    let mut last_penalty: Option<f64> = None;

    std::fs::create_dir_all(&cfg.run.out)?;
    let outcome = (|| -> Result<()> {
        for epoch in 0..cfg.optim.epochs {
            let lr = lr_at(&schedule, epoch);
            let batches = batch_iter(&data.train, cfg.optim.batch_size, shuffle_seed, epoch as u64)?;
            for batch in &batches {
                if cfg.probe.every_steps > 0 && step % cfg.probe.every_steps == 0 {
                    rows.push(step_probe_row(&spec, &theta, &data.train, batch, cfg, master, epoch, step, lr)?);
                }
                let seeds = StepSeeds {
                    penalty: stream_seed(master, stream::PENALTY_LABELS, step as u64),
                    mixup: stream_seed(master, stream::MIXUP, step as u64),
                };
                let out = regularized_step_grad(
                    &spec, &theta, batch, &cfg.reg, &mut cache, epoch, step, &seeds, &hvp,
                )
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { step },
                    other => other,
                })?;
                sgd_step(&mut sgd, &mut theta, &out.grad, lr)?;
                if theta.has_non_finite() {
                    return Err(Error::Diverged { step });
                }
                last_penalty = out.penalty_value;
                step += 1;
            }
            rows.push(epoch_row(&spec, &theta, &data, cfg, master, epoch, step, lr, last_penalty)?);
        }
        Ok(())
    })();

    // keep whatever was logged, even for aborted runs
    write_csv(&rows, &cfg.run.out.join("metrics.csv"))?;
    outcome?;

    let summary = RunSummary::from_rows(&rows, cfg.run.epsilon);
    std::fs::write(cfg.run.out.join("summary.txt"), summary.render(&cfg.run.out.display().to_string()))?;
    std::fs::write(cfg.run.out.join("config.txt"), cfg.render())?;
    save_checkpoint(
        &Checkpoint { spec: spec.clone(), theta: theta.clone(), velocity: Some(sgd.velocity.clone()) },
        &cfg.run.out.join("checkpoint.flck"),
    )?;
    Ok(TrainResult { rows, summary, theta, velocity: sgd.velocity, spec })
}

#[allow(clippy::too_many_arguments)]
fn step_probe_row(
    spec: &ModelSpec,
    theta: &ParamVector,
    train: &Dataset,
    batch: &crate::data::Batch,
    cfg: &ExperimentConfig,
    master: u64,
    epoch: usize,
    step: usize,
    lr: f64,
) -> Result<MetricsRow> {
    let mut row = MetricsRow { epoch, step, lr, ..Default::default() };
    // current mini-batch loss/accuracy at the pre-step parameters
    if let Labels::Hard(labels) = &batch.labels {
        let logits = forward_logits(spec, theta, &batch.inputs)?;
        let (loss, _) = crate::nets::ce_loss_and_dlogits(logits.data(), spec.classes, &batch.labels)?;
        let (_, acc) = predict_and_accuracy(&logits, labels);
        row.train_loss = Some(loss);
        row.train_acc = Some(acc);
    }
    let n = cfg.probe.batch.min(train.len());
    let est = tr_f_mc(
        spec,
        theta,
        &train.inputs,
        n,
        1,
        stream_seed(master, stream::PROBE_TRF_STEP, step as u64),
    )?;
    row.tr_f = Some(est.value);
    Ok(row)
}

#[allow(clippy::too_many_arguments)]
fn epoch_row(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &PreparedData,
    cfg: &ExperimentConfig,
    master: u64,
    epoch: usize,
    step: usize,
    lr: f64,
    last_penalty: Option<f64>,
) -> Result<MetricsRow> {
    let mut row = MetricsRow { epoch, step, lr, penalty_value: last_penalty, ..Default::default() };

    let train_eval = evaluate(spec, theta, &data.train)?;
    row.train_loss = Some(train_eval.loss);
    row.train_acc = Some(train_eval.acc);
    row.train_acc_clean = train_eval.acc_clean;
    row.train_acc_noisy = train_eval.acc_noisy;

    let val_eval = evaluate(spec, theta, &data.val)?;
    row.val_loss = Some(val_eval.loss);
    row.val_acc = Some(val_eval.acc);

    if epoch % cfg.run.eval_every == 0 || epoch + 1 == cfg.optim.epochs {
        row.test_acc = Some(evaluate(spec, theta, &data.test)?.acc);
    }

    let probes_due = cfg.probe.every_epochs > 0 && epoch % cfg.probe.every_epochs == 0;
    if probes_due {
        let n = cfg.probe.trf_examples.min(data.train.len());
        let est = tr_f_mc(
            spec,
            theta,
            &data.train.inputs,
            n,
            cfg.probe.trf_labels_per_example,
            stream_seed(master, stream::PROBE_TRF, epoch as u64),
        )?;
        row.tr_f = Some(est.value);

        let probe_n = cfg.probe.batch.min(data.train.len());
        if cfg.probe.tr_f_minibatch {
            let mut rng = seeded_rng(stream_seed(master, stream::PROBE_TRFB, epoch as u64));
            let idx = sample_indices(data.train.len(), probe_n, &mut rng);
            let inputs = data.train.inputs.gather_rows(&idx);
            let (g, _) = sampled_mean_gradient(spec, theta, &inputs, &mut rng)?;
            row.tr_f_minibatch = Some(g.squared_norm());
        }
        if cfg.probe.tr_h {
            let mut rng = seeded_rng(stream_seed(master, stream::PROBE_TRH, epoch as u64));
            let idx = sample_indices(data.train.len(), probe_n, &mut rng);
            let inputs = data.train.inputs.gather_rows(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
            let oracle = FixedBatchOracle::new(spec, &inputs, Labels::Hard(labels));
            let hvp = HvpConfig { relative_step: cfg.probe.hvp_step };
            let est = tr_h_hutchinson(
                &oracle,
                theta,
                cfg.probe.hutchinson_m,
                stream_seed(master, stream::PROBE_TRH, (epoch as u64) << 20 | 1),
                &hvp,
            )?;
            row.tr_h = Some(est.value);
        }
        if cfg.probe.empirical_fisher {
            let mut rng = seeded_rng(stream_seed(master, stream::PROBE_TRF, (epoch as u64) << 20 | 2));
            let idx = sample_indices(data.train.len(), probe_n, &mut rng);
            let inputs = data.train.inputs.gather_rows(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
            let est = empirical_fisher_trace(spec, theta, &inputs, &labels)?;
            row.empirical_fisher = Some(est.value);
        }
        if let Some(mask) = &data.train.noise_mask {
            let gs = group_gradient_stats(
                spec,
                theta,
                &data.train,
                mask,
                1024,
                stream_seed(master, stream::PROBE_GROUP, epoch as u64),
            )?;
            row.grad_norm_clean = Some(gs.norm_clean);
            row.grad_norm_noisy = Some(gs.norm_noisy);
            row.grad_norm_ratio = gs.ratio.is_finite().then_some(gs.ratio);
            row.cos_clean_noisy = Some(gs.cosine);
        }
    }
    Ok(row)
}
