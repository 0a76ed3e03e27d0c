//! Reverse-mode differentiation on a per-call tape.
//!
//! The tape is rebuilt for every evaluation: nodes record the forward values
//! and enough structure to push adjoints backward. Gradients with respect to
//! parameters and inputs come from the adjoints of the leaf nodes. Everything
//! runs in fixed order, so repeated evaluation at identical inputs is
//! bit-identical.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nets::{ce_loss_and_dlogits, ModelGraph, ModelSpec};
use crate::param::{ParamLayout, ParamVector};
use crate::tensor::Tensor;

/// Node index on a tape.
pub(crate) type NodeId = usize;

pub(crate) enum Op {
    Leaf,
    /// (m,k) x (k,n) -> (m,n)
    MatMul { a: NodeId, b: NodeId },
    /// (m,n) + (n,) broadcast over rows
    AddRowBias { a: NodeId, bias: NodeId },
    Relu { a: NodeId },
    Tanh { a: NodeId },
    /// 3x3 kernel, stride 1, zero padding 1. input (B,Ci,H,W), kernel
    /// (Co,Ci,3,3), bias (Co,), output (B,Co,H,W).
    Conv3x3 { input: NodeId, kernel: NodeId, bias: NodeId },
    /// 2x2 average pooling, stride 2, trailing odd row/column dropped.
    AvgPool2 { a: NodeId },
    Reshape { a: NodeId },
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
}

#[derive(Default)]
pub(crate) struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>) -> NodeId {
        self.push(shape, value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
        let (k2, n) = (self.nodes[b].shape[0], self.nodes[b].shape[1]);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; m * n];
        {
            let av = &self.nodes[a].value;
            let bv = &self.nodes[b].value;
            for i in 0..m {
                for p in 0..k {
                    let aik = av[i * k + p];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aik * brow[j];
                    }
                }
            }
        }
        self.push(vec![m, n], out, Op::MatMul { a, b })
    }

    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
        assert_eq!(self.nodes[bias].value.len(), n, "bias width");
        let mut out = self.nodes[a].value.clone();
        let bv = &self.nodes[bias].value;
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bv[j];
            }
        }
        self.push(vec![m, n], out, Op::AddRowBias { a, bias })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a].value.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = self.nodes[a].shape.clone();
        self.push(shape, out, Op::Relu { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a].value.iter().map(|x| x.tanh()).collect();
        let shape = self.nodes[a].shape.clone();
        self.push(shape, out, Op::Tanh { a })
    }

    pub fn conv3x3(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> NodeId {
        let ishape = self.nodes[input].shape.clone();
        let kshape = self.nodes[kernel].shape.clone();
        let (b, ci, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let co = kshape[0];
        assert_eq!(kshape[1], ci, "conv channel mismatch");
        let mut out = vec![0.0; b * co * h * w];
        {
            let iv = &self.nodes[input].value;
            let kv = &self.nodes[kernel].value;
            let bv = &self.nodes[bias].value;
            for bi in 0..b {
                for o in 0..co {
                    let base_o = ((bi * co) + o) * h * w;
                    for i in 0..h {
                        for j in 0..w {
                            let mut acc = bv[o];
                            for c in 0..ci {
                                let base_i = ((bi * ci) + c) * h * w;
                                let base_k = ((o * ci) + c) * 9;
                                for di in 0..3usize {
                                    let y = i as isize + di as isize - 1;
                                    if y < 0 || y >= h as isize {
                                        continue;
                                    }
                                    for dj in 0..3usize {
                                        let x = j as isize + dj as isize - 1;
                                        if x < 0 || x >= w as isize {
                                            continue;
                                        }
                                        acc += iv[base_i + y as usize * w + x as usize]
                                            * kv[base_k + di * 3 + dj];
                                    }
                                }
                            }
                            out[base_o + i * w + j] = acc;
                        }
                    }
                }
            }
        }
        self.push(vec![b, co, h, w], out, Op::Conv3x3 { input, kernel, bias })
    }

    pub fn avg_pool2(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].shape.clone();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; b * c * ho * wo];
        {
            let av = &self.nodes[a].value;
            for bi in 0..b {
                for ci in 0..c {
                    let base_in = ((bi * c) + ci) * h * w;
                    let base_out = ((bi * c) + ci) * ho * wo;
                    for i in 0..ho {
                        for j in 0..wo {
                            let y = 2 * i;
                            let x = 2 * j;
                            let sum = av[base_in + y * w + x]
                                + av[base_in + y * w + x + 1]
                                + av[base_in + (y + 1) * w + x]
                                + av[base_in + (y + 1) * w + x + 1];
                            out[base_out + i * wo + j] = 0.25 * sum;
                        }
                    }
                }
            }
        }
        self.push(vec![b, c, ho, wo], out, Op::AvgPool2 { a })
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), self.nodes[a].value.len());
        let value = self.nodes[a].value.clone();
        self.push(shape, value, Op::Reshape { a })
    }

    /// Pushes `seed` backward from `root` and returns per-node adjoints.
    /// The tape is not consumed; multiple backward passes over one forward
    /// pass are allowed.
    pub fn backward(&self, root: NodeId, seed: &[f64]) -> Vec<Option<Vec<f64>>> {
        assert_eq!(seed.len(), self.nodes[root].value.len());
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[root] = Some(seed.to_vec());
        for id in (0..=root).rev() {
            let Some(d) = adj[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    adj[id] = Some(d);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let n = self.nodes[*b].shape[1];
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let da = adj[*a].get_or_insert_with(|| vec![0.0; av.len()]);
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let drow = &d[i * n..(i + 1) * n];
                            let brow = &bv[p * n..(p + 1) * n];
                            for j in 0..n {
                                acc += drow[j] * brow[j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                    let db = adj[*b].get_or_insert_with(|| vec![0.0; bv.len()]);
                    for p in 0..k {
                        for i in 0..m {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let drow = &d[i * n..(i + 1) * n];
                            let brow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                brow[j] += aip * drow[j];
                            }
                        }
                    }
                }
                Op::AddRowBias { a, bias } => {
                    let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    {
                        let da = adj[*a].get_or_insert_with(|| vec![0.0; m * n]);
                        for (x, y) in da.iter_mut().zip(&d) {
                            *x += y;
                        }
                    }
                    let dbias = adj[*bias].get_or_insert_with(|| vec![0.0; n]);
                    for i in 0..m {
                        for j in 0..n {
                            dbias[j] += d[i * n + j];
                        }
                    }
                }
                Op::Relu { a } => {
                    let av = &self.nodes[*a].value;
                    let da = adj[*a].get_or_insert_with(|| vec![0.0; av.len()]);
                    for i in 0..av.len() {
                        if av[i] > 0.0 {
                            da[i] += d[i];
                        }
                    }
                }
                Op::Tanh { a } => {
                    let yv = &self.nodes[id].value;
                    let da = adj[*a].get_or_insert_with(|| vec![0.0; yv.len()]);
                    for i in 0..yv.len() {
                        da[i] += d[i] * (1.0 - yv[i] * yv[i]);
                    }
                }
                Op::Conv3x3 { input, kernel, bias } => {
                    let ishape = &self.nodes[*input].shape;
                    let (b, ci, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                    let co = self.nodes[*kernel].shape[0];
                    let iv = self.nodes[*input].value.clone();
                    let kv = self.nodes[*kernel].value.clone();
                    {
                        let dbias = adj[*bias].get_or_insert_with(|| vec![0.0; co]);
                        for bi in 0..b {
                            for o in 0..co {
                                let base_o = ((bi * co) + o) * h * w;
                                for t in 0..h * w {
                                    dbias[o] += d[base_o + t];
                                }
                            }
                        }
                    }
                    {
                        let dk = adj[*kernel].get_or_insert_with(|| vec![0.0; kv.len()]);
                        for bi in 0..b {
                            for o in 0..co {
                                let base_o = ((bi * co) + o) * h * w;
                                for c in 0..ci {
                                    let base_i = ((bi * ci) + c) * h * w;
                                    let base_k = ((o * ci) + c) * 9;
                                    for i in 0..h {
                                        for j in 0..w {
                                            let g = d[base_o + i * w + j];
                                            if g == 0.0 {
                                                continue;
                                            }
                                            for di in 0..3usize {
                                                let y = i as isize + di as isize - 1;
                                                if y < 0 || y >= h as isize {
                                                    continue;
                                                }
                                                for dj in 0..3usize {
                                                    let x = j as isize + dj as isize - 1;
                                                    if x < 0 || x >= w as isize {
                                                        continue;
                                                    }
                                                    dk[base_k + di * 3 + dj] +=
                                                        g * iv[base_i + y as usize * w + x as usize];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    {
                        let din = adj[*input].get_or_insert_with(|| vec![0.0; iv.len()]);
                        for bi in 0..b {
                            for o in 0..co {
                                let base_o = ((bi * co) + o) * h * w;
                                for c in 0..ci {
                                    let base_i = ((bi * ci) + c) * h * w;
                                    let base_k = ((o * ci) + c) * 9;
                                    for i in 0..h {
                                        for j in 0..w {
                                            let g = d[base_o + i * w + j];
                                            if g == 0.0 {
                                                continue;
                                            }
                                            for di in 0..3usize {
                                                let y = i as isize + di as isize - 1;
                                                if y < 0 || y >= h as isize {
                                                    continue;
                                                }
                                                for dj in 0..3usize {
                                                    let x = j as isize + dj as isize - 1;
                                                    if x < 0 || x >= w as isize {
                                                        continue;
                                                    }
                                                    din[base_i + y as usize * w + x as usize] +=
                                                        g * kv[base_k + di * 3 + dj];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::AvgPool2 { a } => {
                    let s = &self.nodes[*a].shape;
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (ho, wo) = (h / 2, w / 2);
                    let da = adj[*a].get_or_insert_with(|| vec![0.0; b * c * h * w]);
                    for bi in 0..b {
                        for ci in 0..c {
                            let base_in = ((bi * c) + ci) * h * w;
                            let base_out = ((bi * c) + ci) * ho * wo;
                            for i in 0..ho {
                                for j in 0..wo {
                                    let g = 0.25 * d[base_out + i * wo + j];
                                    let y = 2 * i;
                                    let x = 2 * j;
                                    da[base_in + y * w + x] += g;
                                    da[base_in + y * w + x + 1] += g;
                                    da[base_in + (y + 1) * w + x] += g;
                                    da[base_in + (y + 1) * w + x + 1] += g;
                                }
                            }
                        }
                    }
                }
                Op::Reshape { a } => {
                    let len = self.nodes[*a].value.len();
                    let da = adj[*a].get_or_insert_with(|| vec![0.0; len]);
                    for (x, y) in da.iter_mut().zip(&d) {
                        *x += y;
                    }
                }
            }
        }
        adj
    }
}

/// Per-example classification targets: integer classes or soft rows.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Hard(Vec<usize>),
    /// Row-major B x C probability rows.
    Soft { probs: Vec<f64>, classes: usize },
}

impl Labels {
    pub fn len(&self, classes: usize) -> usize {
        match self {
            Labels::Hard(v) => v.len(),
            Labels::Soft { probs, .. } => probs.len() / classes,
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            Labels::Hard(v) => v.is_empty(),
            Labels::Soft { probs, .. } => probs.is_empty(),
        }
    }

    /// The single example `i` as a Labels value.
    pub fn select(&self, i: usize, classes: usize) -> Labels {
        match self {
            Labels::Hard(v) => Labels::Hard(vec![v[i]]),
            Labels::Soft { probs, .. } => Labels::Soft {
                probs: probs[i * classes..(i + 1) * classes].to_vec(),
                classes,
            },
        }
    }
}

/// A context that maps parameters to (mean loss, mean gradient).
///
/// Implementations must be deterministic: identical `theta` and identical
/// bound data yield bit-identical output.
pub trait GradOracle {
    fn layout(&self) -> &Arc<ParamLayout>;
    fn eval(&self, theta: &ParamVector) -> Result<(f64, ParamVector)>;
}

/// A model bound to a slice of data and a label source.
pub struct ModelOracle<'a> {
    spec: &'a ModelSpec,
    inputs: &'a Tensor,
    labels: Labels,
    layout: Arc<ParamLayout>,
}

impl<'a> ModelOracle<'a> {
    pub fn new(spec: &'a ModelSpec, inputs: &'a Tensor, labels: Labels) -> Self {
        let layout = spec.layout();
        Self { spec, inputs, labels, layout }
    }
}

impl GradOracle for ModelOracle<'_> {
    fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    fn eval(&self, theta: &ParamVector) -> Result<(f64, ParamVector)> {
        let graph = ModelGraph::build(self.spec, theta, self.inputs)?;
        let (loss, dlogits) = ce_loss_and_dlogits(graph.logits(), self.spec.classes, &self.labels)?;
        let grad = graph.param_grad(&dlogits)?;
        if !loss.is_finite() || grad.has_non_finite() {
            return Err(Error::NonFinite("gradient evaluation".into()));
        }
        Ok((loss, grad))
    }
}

/// Mean loss and mean parameter gradient over the oracle's bound data.
pub fn value_and_param_grad(oracle: &dyn GradOracle, theta: &ParamVector) -> Result<(f64, ParamVector)> {
    if theta.layout().total_len() != oracle.layout().total_len() || **theta.layout() != **oracle.layout() {
        return Err(Error::LayoutMismatch("theta does not match the oracle's model".into()));
    }
    oracle.eval(theta)
}

/// Per-example parameter gradients; row i equals the single-example gradient
/// of example i. The mean of the rows equals the mean gradient.
pub fn per_example_param_grads(
    spec: &ModelSpec,
    theta: &ParamVector,
    inputs: &Tensor,
    labels: &Labels,
) -> Result<Vec<ParamVector>> {
    let b = inputs.batch_len();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut rows = Vec::with_capacity(b);
    for i in 0..b {
        let xi = inputs.select_row(i);
        let li = labels.select(i, spec.classes);
        let oracle = ModelOracle::new(spec, &xi, li);
        let (_, g) = oracle.eval(theta)?;
        rows.push(g);
    }
    Ok(rows)
}

/// Mean loss and per-example input gradients; row i is the gradient of
/// example i's own loss with respect to its own input.
pub fn value_and_input_grad(
    spec: &ModelSpec,
    theta: &ParamVector,
    inputs: &Tensor,
    labels: &Labels,
) -> Result<(f64, Tensor)> {
    let b = inputs.batch_len();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let graph = ModelGraph::build(spec, theta, inputs)?;
    let (loss, dlogits) = ce_loss_and_dlogits(graph.logits(), spec.classes, labels)?;
    let mut input_grads = graph.input_grad(&dlogits)?;
    // The tape differentiates the batch-mean loss; per-example gradients of
    // each example's own loss are B times larger.
    for v in input_grads.data_mut() {
        *v *= b as f64;
    }
    if !loss.is_finite() || input_grads.has_non_finite() {
        return Err(Error::NonFinite("input gradient evaluation".into()));
    }
    Ok((loss, input_grads))
}

/// Central-difference gradient, one coordinate at a time (2P oracle calls).
pub fn finite_diff_grad(oracle: &dyn GradOracle, theta: &ParamVector, step: f64) -> Result<ParamVector> {
    if step <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut grad = ParamVector::zeros(theta.layout().clone());
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let (lp, _) = oracle.eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let (lm, _) = oracle.eval(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (lp - lm) / (2.0 * step);
    }
    Ok(grad)
}
