//! The gradient-norm regularizer family: Fisher Penalty (sampled-label
//! mini-batch gradient), GP (true labels), GPr (uniform random labels),
//! GPx (input gradients), and the mixup baseline.
//!
//! Penalty gradients are formed from finite-difference Hessian-vector
//! products with the sampled labels frozen across both evaluations, and are
//! cached for `refresh_every` steps with the coefficient applied at
//! consumption time.

use rand::Rng;
use rand_distr::Beta;

use crate::autodiff::{value_and_input_grad, GradOracle, Labels, ModelOracle};
use crate::curvature::{
    hvp_fd, mean_grad_for_labels, sample_from_pmf, sample_softmax_labels, sample_uniform_labels,
    sample_indices, FixedBatchOracle, HvpConfig,
};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nets::{LogitBatch, ModelGraph, ModelSpec};
use crate::param::ParamVector;
use crate::rng::seeded_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    None,
    Fp,
    Gp,
    Gpr,
    Gpx,
    Mixup,
}

impl PenaltyKind {
    pub fn is_gradient_penalty(self) -> bool {
        matches!(self, PenaltyKind::Fp | PenaltyKind::Gp | PenaltyKind::Gpr | PenaltyKind::Gpx)
    }

    pub fn name(self) -> &'static str {
        match self {
            PenaltyKind::None => "none",
            PenaltyKind::Fp => "fp",
            PenaltyKind::Gp => "gp",
            PenaltyKind::Gpr => "gpr",
            PenaltyKind::Gpx => "gpx",
            PenaltyKind::Mixup => "mixup",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerConfig {
    pub kind: PenaltyKind,
    pub alpha: f64,
    pub start_epoch: usize,
    pub refresh_every: usize,
    pub mixup_beta: f64,
    /// Penalize the squared gradient norm of the first example alone instead
    /// of the mini-batch mean.
    pub exact_single_example: bool,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            kind: PenaltyKind::None,
            alpha: 0.0,
            start_epoch: 0,
            refresh_every: 10,
            mixup_beta: 1.0,
            exact_single_example: false,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        if self.refresh_every == 0 {
            return Err(Error::Config("refresh_every must be >= 1".into()));
        }
        if self.kind == PenaltyKind::Mixup && self.mixup_beta <= 0.0 {
            return Err(Error::Config("mixup beta must be > 0".into()));
        }
        Ok(())
    }

    /// Whether the additive penalty fires at this epoch.
    pub fn penalty_active(&self, epoch: usize) -> bool {
        self.kind.is_gradient_penalty() && self.alpha != 0.0 && epoch >= self.start_epoch
    }
}

/// The 10-value log-spaced coefficient grid spanning [0.1*v, 10*v].
pub fn alpha_grid(center: f64, points: usize) -> Vec<f64> {
    assert!(points >= 2);
    let lo = (0.1 * center).ln();
    let hi = (10.0 * center).ln();
    (0..points)
        .map(|i| (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    ModelDist,
    Uniform,
    True,
}

/// Draws labels per `source`: from the softmax rows, uniformly over the
/// classes, or passing the true labels through. Deterministic in `seed`.
pub fn sample_labels(
    logits: &LogitBatch,
    source: LabelSource,
    true_labels: &[usize],
    seed: u64,
) -> Vec<usize> {
    let c = logits.classes();
    match source {
        LabelSource::True => true_labels.to_vec(),
        LabelSource::ModelDist => {
            let probs = logits.softmax();
            let mut rng = seeded_rng(seed);
            (0..logits.rows())
                .map(|i| {
                    let u: f64 = rng.gen();
                    sample_from_pmf(&probs[i * c..(i + 1) * c], u)
                })
                .collect()
        }
        LabelSource::Uniform => {
            let mut rng = seeded_rng(seed);
            sample_uniform_labels(c, logits.rows(), &mut rng)
        }
    }
}

/// Labels frozen at penalty-computation time, so the finite-difference
/// evaluations and any scalar re-evaluation see identical randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPenaltyLabels {
    pub kind: PenaltyKind,
    /// Sampled (FP/GPr) or true (GP) labels; `None` for GPx, whose penalty
    /// uses true labels with no sampling.
    pub labels: Option<Vec<usize>>,
}

fn batch_hard_labels(batch: &Batch) -> Result<&[usize]> {
    batch
        .hard_labels()
        .ok_or_else(|| Error::InvalidArgument("penalties need hard-labelled batches".into()))
}

/// Samples and freezes the labels the penalty kind consumes.
pub fn freeze_penalty_labels(
    spec: &ModelSpec,
    theta: &ParamVector,
    batch: &Batch,
    cfg: &RegularizerConfig,
    seed: u64,
) -> Result<FrozenPenaltyLabels> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let labels = match cfg.kind {
        PenaltyKind::Fp => {
            let mut rng = seeded_rng(seed);
            if cfg.exact_single_example {
                let x1 = batch.inputs.select_row(0);
                let graph = ModelGraph::build(spec, theta, &x1)?;
                Some(sample_softmax_labels(spec, &graph, &mut rng))
            } else {
                let graph = ModelGraph::build(spec, theta, &batch.inputs)?;
                Some(sample_softmax_labels(spec, &graph, &mut rng))
            }
        }
        PenaltyKind::Gp => Some(batch_hard_labels(batch)?.to_vec()),
        PenaltyKind::Gpr => {
            let mut rng = seeded_rng(seed);
            Some(sample_uniform_labels(spec.classes, batch.len(), &mut rng))
        }
        PenaltyKind::Gpx => None,
        PenaltyKind::None | PenaltyKind::Mixup => {
            return Err(Error::InvalidArgument(format!(
                "kind {} has no penalty term",
                cfg.kind.name()
            )))
        }
    };
    Ok(FrozenPenaltyLabels { kind: cfg.kind, labels })
}

/// The inputs the FP/GP/GPr penalty gradient differentiates through: the
/// whole batch, or the first example in exact-single-example mode.
fn penalty_inputs(batch: &Batch, cfg: &RegularizerConfig) -> Tensor {
    if cfg.kind == PenaltyKind::Fp && cfg.exact_single_example {
        batch.inputs.select_row(0)
    } else {
        batch.inputs.clone()
    }
}

/// Unscaled penalty scalar under frozen labels (alpha not applied).
pub fn penalty_value_frozen(
    spec: &ModelSpec,
    theta: &ParamVector,
    batch: &Batch,
    frozen: &FrozenPenaltyLabels,
    cfg: &RegularizerConfig,
) -> Result<f64> {
    match frozen.kind {
        PenaltyKind::Fp | PenaltyKind::Gp | PenaltyKind::Gpr => {
            let inputs = penalty_inputs(batch, cfg);
            let labels = frozen.labels.as_ref().expect("frozen labels");
            let graph = ModelGraph::build(spec, theta, &inputs)?;
            let g = mean_grad_for_labels(spec, &graph, labels)?;
            Ok(g.squared_norm())
        }
        PenaltyKind::Gpx => {
            let labels = Labels::Hard(batch_hard_labels(batch)?.to_vec());
            let (_, gx) = value_and_input_grad(spec, theta, &batch.inputs, &labels)?;
            let b = batch.len();
            let mut total = 0.0;
            for i in 0..b {
                total += gx.row(i).iter().map(|v| v * v).sum::<f64>();
            }
            Ok(total / b as f64)
        }
        _ => Err(Error::InvalidArgument("no penalty term for this kind".into())),
    }
}

/// Unscaled penalty scalar; labels are sampled fresh from `seed`.
pub fn penalty_value(
    spec: &ModelSpec,
    theta: &ParamVector,
    batch: &Batch,
    cfg: &RegularizerConfig,
    seed: u64,
) -> Result<f64> {
    let frozen = freeze_penalty_labels(spec, theta, batch, cfg, seed)?;
    penalty_value_frozen(spec, theta, batch, &frozen, cfg)
}

/// Gradient of the unscaled penalty under frozen labels, plus the penalty
/// value at the same point.
pub fn penalty_grad_frozen(
    spec: &ModelSpec,
    theta: &ParamVector,
    batch: &Batch,
    frozen: &FrozenPenaltyLabels,
    cfg: &RegularizerConfig,
    hvp: &HvpConfig,
) -> Result<(ParamVector, f64)> {
    match frozen.kind {
        PenaltyKind::Fp | PenaltyKind::Gp | PenaltyKind::Gpr => {
            let inputs = penalty_inputs(batch, cfg);
            let labels = frozen.labels.as_ref().expect("frozen labels");
            let graph = ModelGraph::build(spec, theta, &inputs)?;
            let ghat = mean_grad_for_labels(spec, &graph, labels)?;
            let value = ghat.squared_norm();
            if ghat.l2_norm() == 0.0 {
                return Ok((ParamVector::zeros(theta.layout().clone()), value));
            }
            // grad ||ghat(theta)||^2 = 2 H ghat, with the labels held fixed
            let oracle = FixedBatchOracle::new(spec, &inputs, Labels::Hard(labels.clone()));
            let mut hv = hvp_fd(&oracle, theta, &ghat, hvp)?;
            hv.scale(2.0);
            Ok((hv, value))
        }
        PenaltyKind::Gpx => {
            let labels = batch_hard_labels(batch)?.to_vec();
            let (_, gx) = value_and_input_grad(spec, theta, &batch.inputs, &Labels::Hard(labels.clone()))?;
            let b = batch.len();
            let mut total = ParamVector::zeros(theta.layout().clone());
            let mut value = 0.0;
            for i in 0..b {
                let ci = gx.row(i);
                let csq: f64 = ci.iter().map(|v| v * v).sum();
                value += csq;
                let cnorm = csq.sqrt();
                if cnorm == 0.0 {
                    continue;
                }
                // d/dtheta (g_x . c_i) by a central difference over the input
                let xi = batch.inputs.row(i);
                let xnorm = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
                let eps = hvp.relative_step * (1.0 + xnorm) / cnorm;
                let mut xp = xi.to_vec();
                let mut xm = xi.to_vec();
                for ((p, m), &c) in xp.iter_mut().zip(xm.iter_mut()).zip(ci) {
                    *p += eps * c;
                    *m -= eps * c;
                }
                let mut shape = vec![1usize];
                shape.extend_from_slice(&batch.inputs.shape()[1..]);
                let label_i = Labels::Hard(vec![labels[i]]);
                let xp = Tensor::new(shape.clone(), xp)?;
                let xm = Tensor::new(shape, xm)?;
                let (_, gp) = ModelOracle::new(spec, &xp, label_i.clone()).eval(theta)?;
                let (_, gm) = ModelOracle::new(spec, &xm, label_i).eval(theta)?;
                let mut diff = gp;
                diff.axpy(-1.0, &gm);
                // doubled, averaged over the batch
                total.axpy(2.0 / (b as f64 * 2.0 * eps), &diff);
            }
            value /= b as f64;
            if total.has_non_finite() {
                return Err(Error::NonFinite("input-gradient penalty".into()));
            }
            Ok((total, value))
        }
        _ => Err(Error::InvalidArgument("no penalty term for this kind".into())),
    }
}

/// Gradient of the unscaled penalty; labels sampled fresh from `seed` and
/// held fixed across the finite-difference evaluations.
pub fn penalty_grad(
    spec: &ModelSpec,
    theta: &ParamVector,
    batch: &Batch,
    cfg: &RegularizerConfig,
    seed: u64,
    hvp: &HvpConfig,
) -> Result<(ParamVector, f64)> {
    let frozen = freeze_penalty_labels(spec, theta, batch, cfg, seed)?;
    penalty_grad_frozen(spec, theta, batch, &frozen, cfg, hvp)
}

/// Cached penalty gradient (stored unscaled; alpha applied at consumption).
#[derive(Debug, Clone, Default)]
pub struct PenaltyCache {
    grad: Option<ParamVector>,
    computed_at_step: usize,
    value: f64,
}

impl PenaltyCache {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.grad.is_none()
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn computed_at_step(&self) -> usize {
        self.computed_at_step
    }
}

/// Seeds for the randomness one optimization step may consume.
#[derive(Debug, Clone, Copy)]
pub struct StepSeeds {
    pub penalty: u64,
    pub mixup: u64,
}

/// What one training step's gradient computation produced.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub grad: ParamVector,
    pub base_loss: f64,
    /// Penalty value at the cache's computation time; `None` while inactive.
    pub penalty_value: Option<f64>,
}

/// Full objective gradient for one step: the base mini-batch gradient, plus
/// the alpha-scaled cached penalty gradient when the penalty is active, with
/// the cache refreshed every `refresh_every` steps. Mixup replaces the batch
/// before the base gradient. Inactive features consume no randomness.
pub fn regularized_step_grad(
    spec: &ModelSpec,
    theta: &ParamVector,
    batch: &Batch,
    cfg: &RegularizerConfig,
    cache: &mut PenaltyCache,
    epoch: usize,
    step: usize,
    seeds: &StepSeeds,
    hvp: &HvpConfig,
) -> Result<StepOutput> {
    cfg.validate()?;
    let mixed;
    let effective = if cfg.kind == PenaltyKind::Mixup && epoch >= cfg.start_epoch {
        mixed = mixup_batch(batch, spec.classes, cfg.mixup_beta, seeds.mixup)?;
        &mixed
    } else {
        batch
    };

    let oracle = ModelOracle::new(spec, &effective.inputs, effective.labels.clone());
    let (base_loss, mut grad) = oracle.eval(theta)?;

    if !cfg.penalty_active(epoch) {
        return Ok(StepOutput { grad, base_loss, penalty_value: None });
    }

    if cache.grad.is_none() || step % cfg.refresh_every == 0 {
        let (pg, pv) = penalty_grad(spec, theta, batch, cfg, seeds.penalty, hvp)?;
        cache.grad = Some(pg);
        cache.computed_at_step = step;
        cache.value = pv;
    }
    debug_assert!(step - cache.computed_at_step < cfg.refresh_every);
    grad.axpy(cfg.alpha, cache.grad.as_ref().expect("cache populated above"));
    Ok(StepOutput { grad, base_loss, penalty_value: Some(cache.value) })
}

/// Mixup with an explicit mixing weight: pairs every example with a seeded
/// random partner and mixes inputs and one-hot labels with weight `lambda`.
pub fn mixup_batch_with_lambda(
    batch: &Batch,
    classes: usize,
    lambda: f64,
    seed: u64,
) -> Result<Batch> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall);
    }
    let labels = batch_hard_labels(batch)?;
    let b = batch.len();
    let mut rng = seeded_rng(seed);
    let partner = sample_indices(b, b, &mut rng);
    let d: usize = batch.inputs.shape()[1..].iter().product();
    let mut inputs = Vec::with_capacity(b * d);
    let mut soft = vec![0.0; b * classes];
    for i in 0..b {
        let j = partner[i];
        let xi = batch.inputs.row(i);
        let xj = batch.inputs.row(j);
        for k in 0..d {
            inputs.push(lambda * xi[k] + (1.0 - lambda) * xj[k]);
        }
        soft[i * classes + labels[i]] += lambda;
        soft[i * classes + labels[j]] += 1.0 - lambda;
    }
    let mut shape = vec![b];
    shape.extend_from_slice(&batch.inputs.shape()[1..]);
    Ok(Batch {
        inputs: Tensor::new(shape, inputs)?,
        labels: Labels::Soft { probs: soft, classes },
        noise_mask: batch.noise_mask.clone(),
        indices: batch.indices.clone(),
    })
}

/// Mixup with lambda drawn from Beta(beta, beta); deterministic in `seed`.
pub fn mixup_batch(batch: &Batch, classes: usize, beta: f64, seed: u64) -> Result<Batch> {
    if beta <= 0.0 {
        return Err(Error::Config("mixup beta must be > 0".into()));
    }
    let mut rng = seeded_rng(seed);
    let dist = Beta::new(beta, beta)
        .map_err(|e| Error::Config(format!("invalid mixup beta: {e}")))?;
    let lambda: f64 = rng.sample(dist);
    // partner permutation comes from the same stream, after the lambda draw
    let partner_seed = rng.gen::<u64>();
    mixup_batch_with_lambda(batch, classes, lambda, partner_seed)
}
