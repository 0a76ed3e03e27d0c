//! Independent oracles used by the test suites.
//!
//! Nothing here touches the tape in [`crate::autodiff`]; these implementations
//! exist to cross-check it and the curvature probes by a different route.

use std::sync::Arc;

use crate::autodiff::GradOracle;
use crate::error::Result;
use crate::nets::{Activation, ModelKind, ModelSpec};
use crate::param::{ParamLayout, ParamVector};

/// l(theta) = 0.5 * theta^T A theta for a fixed symmetric A.
/// Gradient A*theta, Hessian A, trace sum of the diagonal.
pub struct QuadraticOracle {
    a: Vec<f64>, // n x n row-major
    n: usize,
    layout: Arc<ParamLayout>,
}

impl QuadraticOracle {
    pub fn diag(diag: Vec<f64>) -> Self {
        let n = diag.len();
        let mut a = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            a[i * n + i] = *d;
        }
        Self::full(a, n)
    }

    pub fn full(a: Vec<f64>, n: usize) -> Self {
        assert_eq!(a.len(), n * n);
        let layout = Arc::new(ParamLayout::new(vec![("theta".into(), vec![n])]));
        Self { a, n, layout }
    }

    pub fn theta(&self, values: &[f64]) -> ParamVector {
        ParamVector::from_data(self.layout.clone(), values.to_vec()).unwrap()
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.a[i * self.n + i]).sum()
    }

    /// Exact Hessian-vector product A*v.
    pub fn hv(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            for j in 0..self.n {
                out[i] += self.a[i * self.n + j] * v[j];
            }
        }
        out
    }
}

impl GradOracle for QuadraticOracle {
    fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    fn eval(&self, theta: &ParamVector) -> Result<(f64, ParamVector)> {
        let t = theta.data();
        let g = self.hv(t);
        let loss = 0.5 * t.iter().zip(&g).map(|(x, y)| x * y).sum::<f64>();
        Ok((loss, ParamVector::from_data(self.layout.clone(), g)?))
    }
}

/// Forward-mode dual number: value and one directional derivative.
#[derive(Debug, Clone, Copy)]
struct Dual {
    v: f64,
    d: f64,
}

impl Dual {
    fn c(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
    fn add(self, o: Dual) -> Self {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
    fn mul(self, o: Dual) -> Self {
        Dual { v: self.v * o.v, d: self.d * o.v + self.v * o.d }
    }
    fn relu(self) -> Self {
        if self.v > 0.0 {
            self
        } else {
            Dual { v: 0.0, d: 0.0 }
        }
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual { v: t, d: self.d * (1.0 - t * t) }
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual { v: e, d: self.d * e }
    }
    fn ln(self) -> Self {
        Dual { v: self.v.ln(), d: self.d / self.v }
    }
}

/// Straight-line scalar re-implementation of the MLP cross-entropy loss,
/// differentiated one parameter at a time with forward-mode dual numbers.
///
/// Cost is O(P) forward passes; only used on tiny fixtures. Supports MLPs
/// with hard labels (the fixtures the brute-force table covers).
pub struct ScalarMlpOracle {
    widths: Vec<usize>, // input, hidden..., classes
    activation: Activation,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    layout: Arc<ParamLayout>,
}

impl ScalarMlpOracle {
    pub fn new(spec: &ModelSpec, inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Self {
        let hidden = match &spec.kind {
            ModelKind::Linear => Vec::new(),
            ModelKind::Mlp { hidden } => hidden.clone(),
            ModelKind::SmallConv { .. } => panic!("scalar oracle only covers dense models"),
        };
        let mut widths = vec![spec.input_dim()];
        widths.extend(hidden);
        widths.push(spec.classes);
        Self { widths, activation: spec.activation, inputs, labels, layout: spec.layout() }
    }

    /// Loss for one example with parameter `wrt` perturbed along the dual axis
    /// (`wrt = None` for a plain value evaluation).
    fn example_loss(&self, theta: &[f64], example: usize, wrt: Option<usize>) -> Dual {
        let param = |flat: usize| -> Dual {
            Dual { v: theta[flat], d: if wrt == Some(flat) { 1.0 } else { 0.0 } }
        };
        let mut act: Vec<Dual> = self.inputs[example].iter().map(|&v| Dual::c(v)).collect();
        let mut offset = 0usize;
        let n_layers = self.widths.len() - 1;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let w_off = offset;
            let b_off = offset + fan_in * fan_out;
            let mut next = Vec::with_capacity(fan_out);
            for j in 0..fan_out {
                // z_j = sum_i act_i * w[i][j] + b_j
                let mut z = param(b_off + j);
                for (i, &a) in act.iter().enumerate() {
                    z = z.add(a.mul(param(w_off + i * fan_out + j)));
                }
                if l + 1 < n_layers {
                    z = match self.activation {
                        Activation::Relu => z.relu(),
                        Activation::Tanh => z.tanh(),
                    };
                }
                next.push(z);
            }
            act = next;
            offset = b_off + fan_out;
        }
        // cross-entropy: lse(z) - z_y, stabilized by the (constant) row max
        let max = act.iter().map(|d| d.v).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = Dual::c(0.0);
        for z in &act {
            sum = sum.add(z.add(Dual::c(-max)).exp());
        }
        let lse = sum.ln().add(Dual::c(max));
        let y = self.labels[example];
        lse.add(act[y].mul(Dual::c(-1.0)))
    }
}

impl GradOracle for ScalarMlpOracle {
    fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    fn eval(&self, theta: &ParamVector) -> Result<(f64, ParamVector)> {
        let t = theta.data();
        let b = self.inputs.len();
        let mut loss = 0.0;
        for e in 0..b {
            loss += self.example_loss(t, e, None).v;
        }
        loss /= b as f64;
        let mut grad = ParamVector::zeros(self.layout.clone());
        for p in 0..t.len() {
            let mut d = 0.0;
            for e in 0..b {
                d += self.example_loss(t, e, Some(p)).d;
            }
            grad.data_mut()[p] = d / b as f64;
        }
        Ok((loss, grad))
    }
}

/// Full Hessian of an oracle's loss by column-wise central differences of its
/// gradient, with a plain absolute step. Returns the P x P matrix row-major.
pub fn full_hessian_fd(oracle: &dyn GradOracle, theta: &ParamVector, step: f64) -> Result<Vec<f64>> {
    let p = theta.len();
    let mut h = vec![0.0; p * p];
    let mut probe = theta.clone();
    for j in 0..p {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + step;
        let (_, gp) = oracle.eval(&probe)?;
        probe.data_mut()[j] = orig - step;
        let (_, gm) = oracle.eval(&probe)?;
        probe.data_mut()[j] = orig;
        for i in 0..p {
            h[i * p + j] = (gp.data()[i] - gm.data()[i]) / (2.0 * step);
        }
    }
    Ok(h)
}

/// Matrix-vector product for a row-major square matrix.
pub fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            out[i] += m[i * n + j] * v[j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_oracle_gradient() {
        let q = QuadraticOracle::diag(vec![1.0, 2.0, 3.0]);
        let theta = q.theta(&[1.0, 1.0, 1.0]);
        let (loss, g) = q.eval(&theta).unwrap();
        assert!((loss - 3.0).abs() < 1e-15);
        assert_eq!(g.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(q.trace(), 6.0);
    }

    #[test]
    fn dual_arithmetic() {
        // d/dx of x*tanh(x) at 0.7
        let x = Dual { v: 0.7, d: 1.0 };
        let y = x.mul(x.tanh());
        let t = 0.7f64.tanh();
        let expect = t + 0.7 * (1.0 - t * t);
        assert!((y.d - expect).abs() < 1e-14);
    }
}
