//! Model specifications, initialization, forward pass, and loss utilities.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Labels, NodeId, Tape};
use crate::error::{Error, Result};
use crate::param::{ParamLayout, ParamVector};
use crate::rng::seeded_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelKind {
    /// Softmax regression: one dense layer straight to logits.
    Linear,
    /// Fully connected net with at least one hidden layer.
    Mlp { hidden: Vec<usize> },
    /// conv(3x3) - act - pool - conv(3x3) - act - pool - dense.
    SmallConv { c1: usize, c2: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub activation: Activation,
    /// Per-example input shape (without the batch axis).
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, classes: usize, activation: Activation) -> Self {
        Self { kind: ModelKind::Mlp { hidden }, activation, input_shape: vec![input_dim], classes }
    }

    pub fn linear(input_dim: usize, classes: usize) -> Self {
        Self { kind: ModelKind::Linear, activation: Activation::Relu, input_shape: vec![input_dim], classes }
    }

    pub fn small_conv(
        channels_in: usize,
        height: usize,
        width: usize,
        c1: usize,
        c2: usize,
        classes: usize,
        activation: Activation,
    ) -> Self {
        Self {
            kind: ModelKind::SmallConv { c1, c2 },
            activation,
            input_shape: vec![channels_in, height, width],
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("model needs at least 2 classes".into()));
        }
        match &self.kind {
            ModelKind::Linear => {
                if self.input_shape.iter().product::<usize>() == 0 {
                    return Err(Error::Config("empty input shape".into()));
                }
            }
            ModelKind::Mlp { hidden } => {
                if hidden.is_empty() {
                    return Err(Error::Config("MLP needs at least one hidden layer".into()));
                }
                if self.input_shape.iter().product::<usize>() == 0 {
                    return Err(Error::Config("empty input shape".into()));
                }
            }
            ModelKind::SmallConv { c1, c2 } => {
                if *c1 == 0 || *c2 == 0 {
                    return Err(Error::Config("conv channel counts must be positive".into()));
                }
                if self.input_shape.len() != 3 {
                    return Err(Error::Config("SmallConv input shape must be (channels, height, width)".into()));
                }
                let (h, w) = (self.input_shape[1], self.input_shape[2]);
                if h / 4 == 0 || w / 4 == 0 {
                    return Err(Error::Config("SmallConv input too small for two 2x2 pools".into()));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Canonical flat parameter ordering: layer order, weight before bias.
    pub fn layout(&self) -> Arc<ParamLayout> {
        let mut parts: Vec<(String, Vec<usize>)> = Vec::new();
        match &self.kind {
            ModelKind::Linear => {
                parts.push(("w0".into(), vec![self.input_dim(), self.classes]));
                parts.push(("b0".into(), vec![self.classes]));
            }
            ModelKind::Mlp { hidden } => {
                let mut fan_in = self.input_dim();
                for (l, &width) in hidden.iter().enumerate() {
                    parts.push((format!("w{l}"), vec![fan_in, width]));
                    parts.push((format!("b{l}"), vec![width]));
                    fan_in = width;
                }
                let l = hidden.len();
                parts.push((format!("w{l}"), vec![fan_in, self.classes]));
                parts.push((format!("b{l}"), vec![self.classes]));
            }
            ModelKind::SmallConv { c1, c2 } => {
                let ci = self.input_shape[0];
                parts.push(("conv1_w".into(), vec![*c1, ci, 3, 3]));
                parts.push(("conv1_b".into(), vec![*c1]));
                parts.push(("conv2_w".into(), vec![*c2, *c1, 3, 3]));
                parts.push(("conv2_b".into(), vec![*c2]));
                let (h, w) = (self.input_shape[1], self.input_shape[2]);
                let flat = c2 * (h / 2 / 2) * (w / 2 / 2);
                parts.push(("dense_w".into(), vec![flat, self.classes]));
                parts.push(("dense_b".into(), vec![self.classes]));
            }
        }
        Arc::new(ParamLayout::new(parts))
    }

    pub fn param_count(&self) -> usize {
        self.layout().total_len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Zero-mean Gaussian weights with variance 2/fan_in; zero biases.
    HeNormal,
    Zeros,
}

/// Draws parameters for `spec`; deterministic in `seed`.
pub fn init_params(spec: &ModelSpec, scheme: InitScheme, seed: u64) -> ParamVector {
    let layout = spec.layout();
    let mut out = ParamVector::zeros(layout.clone());
    if scheme == InitScheme::Zeros {
        return out;
    }
    let mut rng = seeded_rng(seed);
    for entry in layout.entries() {
        let is_bias = entry.shape.len() == 1;
        if is_bias {
            continue;
        }
        // weights: (fan_in, fan_out) for dense, (co, ci, kh, kw) for conv
        let fan_in = if entry.shape.len() == 2 {
            entry.shape[0]
        } else {
            entry.shape[1] * entry.shape[2] * entry.shape[3]
        };
        let std = (2.0 / fan_in as f64).sqrt();
        let dst = &mut out.data_mut()[entry.offset..entry.offset + entry.len()];
        for v in dst {
            let z: f64 = rng.sample(StandardNormal);
            *v = std * z;
        }
    }
    out
}

/// Logit matrix, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBatch {
    rows: usize,
    classes: usize,
    data: Vec<f64>,
}

impl LogitBatch {
    pub fn new(rows: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * classes {
            return Err(Error::ShapeMismatch { expected: vec![rows, classes], got: vec![data.len()] });
        }
        Ok(Self { rows, classes, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    /// Row-major matrix of softmax probabilities.
    pub fn softmax(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            softmax_row(self.row(i), &mut out[i * self.classes..(i + 1) * self.classes]);
        }
        out
    }
}

pub(crate) fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        let e = (z - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// log(sum(exp(row))) with max-subtraction.
fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let s: f64 = row.iter().map(|&z| (z - max).exp()).sum();
    max + s.ln()
}

/// The forward computation of one model on one input batch, kept on a tape
/// so that gradients with respect to parameters and inputs can be pulled
/// multiple times from a single forward pass.
pub(crate) struct ModelGraph {
    tape: Tape,
    input_node: NodeId,
    logits_node: NodeId,
    param_nodes: Vec<NodeId>,
    layout: Arc<ParamLayout>,
    input_shape: Vec<usize>,
}

impl ModelGraph {
    pub fn build(spec: &ModelSpec, theta: &ParamVector, inputs: &Tensor) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        if theta.layout().total_len() != layout.total_len() || **theta.layout() != *layout {
            return Err(Error::LayoutMismatch("theta does not match the model spec".into()));
        }
        let b = inputs.batch_len();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        let per_example: usize = inputs.shape()[1..].iter().product();
        if per_example != spec.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: spec.input_shape.clone(),
                got: inputs.shape()[1..].to_vec(),
            });
        }

        let mut tape = Tape::new();
        let mut param_nodes = Vec::with_capacity(layout.entries().len());
        for entry in layout.entries() {
            let mut shape = entry.shape.clone();
            if shape.len() == 1 {
                // biases enter the tape as rows
                shape = vec![shape[0]];
            }
            let data = theta.data()[entry.offset..entry.offset + entry.len()].to_vec();
            param_nodes.push(tape.leaf(shape, data));
        }

        let input_shape: Vec<usize> = std::iter::once(b).chain(spec.input_shape.iter().copied()).collect();
        let input_node = tape.leaf(input_shape.clone(), inputs.data().to_vec());

        let act = |tape: &mut Tape, a: NodeId| match spec.activation {
            Activation::Relu => tape.relu(a),
            Activation::Tanh => tape.tanh(a),
        };

        let logits_node = match &spec.kind {
            ModelKind::Linear => {
                let h = tape.reshape(input_node, vec![b, spec.input_dim()]);
                let z = tape.matmul(h, param_nodes[0]);
                tape.add_row_bias(z, param_nodes[1])
            }
            ModelKind::Mlp { hidden } => {
                let mut h = tape.reshape(input_node, vec![b, spec.input_dim()]);
                let n_layers = hidden.len() + 1;
                for l in 0..n_layers {
                    let w = param_nodes[2 * l];
                    let bias = param_nodes[2 * l + 1];
                    let z = tape.matmul(h, w);
                    let z = tape.add_row_bias(z, bias);
                    h = if l + 1 < n_layers { act(&mut tape, z) } else { z };
                }
                h
            }
            ModelKind::SmallConv { c2, .. } => {
                let (hh, ww) = (spec.input_shape[1], spec.input_shape[2]);
                let x = tape.reshape(input_node, vec![b, spec.input_shape[0], hh, ww]);
                let z1 = tape.conv3x3(x, param_nodes[0], param_nodes[1]);
                let a1 = act(&mut tape, z1);
                let p1 = tape.avg_pool2(a1);
                let z2 = tape.conv3x3(p1, param_nodes[2], param_nodes[3]);
                let a2 = act(&mut tape, z2);
                let p2 = tape.avg_pool2(a2);
                let flat = c2 * (hh / 2 / 2) * (ww / 2 / 2);
                let f = tape.reshape(p2, vec![b, flat]);
                let z = tape.matmul(f, param_nodes[4]);
                tape.add_row_bias(z, param_nodes[5])
            }
        };

        if tape.value(logits_node).iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("forward pass".into()));
        }

        Ok(Self { tape, input_node, logits_node, param_nodes, layout, input_shape })
    }

    pub fn logits(&self) -> &[f64] {
        self.tape.value(self.logits_node)
    }

    /// Parameter gradient for the given logit adjoint.
    pub fn param_grad(&self, dlogits: &[f64]) -> Result<ParamVector> {
        let adj = self.tape.backward(self.logits_node, dlogits);
        let mut grad = ParamVector::zeros(self.layout.clone());
        for (entry, &node) in self.layout.entries().iter().zip(&self.param_nodes) {
            if let Some(a) = &adj[node] {
                grad.data_mut()[entry.offset..entry.offset + entry.len()].copy_from_slice(a);
            }
        }
        Ok(grad)
    }

    /// Input gradient for the given logit adjoint, shaped like the batch.
    pub fn input_grad(&self, dlogits: &[f64]) -> Result<Tensor> {
        let adj = self.tape.backward(self.logits_node, dlogits);
        let mut out = Tensor::zeros(self.input_shape.clone());
        if let Some(a) = &adj[self.input_node] {
            out.data_mut().copy_from_slice(a);
        }
        Ok(out)
    }

}

/// Mean cross-entropy and its gradient with respect to the logits
/// (the 1/B factor of the mean is folded into the adjoint).
pub(crate) fn ce_loss_and_dlogits(logits: &[f64], classes: usize, labels: &Labels) -> Result<(f64, Vec<f64>)> {
    let b = logits.len() / classes;
    if labels.len(classes) != b {
        return Err(Error::ShapeMismatch { expected: vec![b], got: vec![labels.len(classes)] });
    }
    let mut dlogits = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let row = &logits[i * classes..(i + 1) * classes];
        let lse = log_sum_exp(row);
        let drow = &mut dlogits[i * classes..(i + 1) * classes];
        softmax_row(row, drow);
        match labels {
            Labels::Hard(ys) => {
                let y = ys[i];
                if y >= classes {
                    return Err(Error::LabelOutOfRange { label: y, classes });
                }
                loss += lse - row[y];
                drow[y] -= 1.0;
            }
            Labels::Soft { probs, .. } => {
                let q = &probs[i * classes..(i + 1) * classes];
                for c in 0..classes {
                    if q[c] != 0.0 {
                        loss += q[c] * (lse - row[c]);
                    }
                    drow[c] -= q[c];
                }
            }
        }
        for d in drow.iter_mut() {
            *d *= inv_b;
        }
    }
    Ok((loss * inv_b, dlogits))
}

/// Forward pass to logits; deterministic.
pub fn forward_logits(spec: &ModelSpec, theta: &ParamVector, inputs: &Tensor) -> Result<LogitBatch> {
    let graph = ModelGraph::build(spec, theta, inputs)?;
    LogitBatch::new(inputs.batch_len(), spec.classes, graph.logits().to_vec())
}

/// Mean of -ln softmax(row)[label]; stabilized via max-subtraction.
pub fn softmax_cross_entropy(logits: &LogitBatch, labels: &[usize]) -> Result<f64> {
    let (loss, _) = ce_loss_and_dlogits(logits.data(), logits.classes(), &Labels::Hard(labels.to_vec()))?;
    Ok(loss)
}

/// Cross-entropy against soft target rows (B x C).
pub fn softmax_cross_entropy_soft(logits: &LogitBatch, targets: &[f64]) -> Result<f64> {
    let (loss, _) = ce_loss_and_dlogits(
        logits.data(),
        logits.classes(),
        &Labels::Soft { probs: targets.to_vec(), classes: logits.classes() },
    )?;
    Ok(loss)
}

/// Argmax per row (ties break to the lowest class index) and the fraction of
/// rows matching `labels`.
pub fn predict_and_accuracy(logits: &LogitBatch, labels: &[usize]) -> (Vec<usize>, f64) {
    let mut preds = Vec::with_capacity(logits.rows());
    let mut correct = 0usize;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if i < labels.len() && best == labels[i] {
            correct += 1;
        }
        preds.push(best);
    }
    let acc = if logits.rows() == 0 { 0.0 } else { correct as f64 / logits.rows() as f64 };
    (preds, acc)
}
