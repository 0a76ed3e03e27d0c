//! SGD with momentum and coupled weight decay, plus step schedules.

use crate::error::{Error, Result};
use crate::param::ParamVector;

/// Momentum buffer and hyperparameters for SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: ParamVector,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdState {
    pub fn new(theta: &ParamVector, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config("momentum must be in [0,1)".into()));
        }
        if weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        Ok(Self { velocity: ParamVector::zeros(theta.layout().clone()), momentum, weight_decay })
    }
}

/// One update: v' = mu v + (grad + wd theta); theta' = theta - lr v'.
/// Decay is added to the gradient before the momentum buffer.
pub fn sgd_step(state: &mut SgdState, theta: &mut ParamVector, grad: &ParamVector, lr: f64) -> Result<()> {
    theta.check_same_layout(grad)?;
    theta.check_same_layout(&state.velocity)?;
    if lr <= 0.0 {
        return Err(Error::InvalidArgument("learning rate must be positive".into()));
    }
    let mu = state.momentum;
    let wd = state.weight_decay;
    let v = state.velocity.data_mut();
    let t = theta.data_mut();
    let g = grad.data();
    for i in 0..t.len() {
        v[i] = mu * v[i] + (g[i] + wd * t[i]);
        t[i] -= lr * v[i];
    }
    Ok(())
}

/// Step schedule: the base rate decays by `gamma` at each milestone epoch
/// (milestones are inclusive).
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn constant(base_lr: f64) -> Self {
        Self { base_lr, milestones: Vec::new(), gamma: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base learning rate must be positive".into()));
        }
        if !(0.0 < self.gamma && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must be in (0,1]".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// base_lr * gamma^(number of milestones <= epoch).
pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    let hits = schedule.milestones.iter().filter(|&&m| m <= epoch).count();
    schedule.base_lr * schedule.gamma.powi(hits as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::param::{ParamLayout, ParamVector};

    fn vec2(a: f64, b: f64) -> ParamVector {
        let layout = Arc::new(ParamLayout::new(vec![("t".into(), vec![2])]));
        ParamVector::from_data(layout, vec![a, b]).unwrap()
    }

    #[test]
    fn vanilla_step() {
        let mut theta = vec2(1.0, 1.0);
        let grad = vec2(1.0, 2.0);
        let mut st = SgdState::new(&theta, 0.0, 0.0).unwrap();
        sgd_step(&mut st, &mut theta, &grad, 0.1).unwrap();
        assert_eq!(theta.data(), &[0.9, 0.8]);
    }

    #[test]
    fn momentum_two_steps_hand_unrolled() {
        // constant grad g with mu=0.9: second update is lr * 1.9 * g
        let mut theta = vec2(0.0, 0.0);
        let grad = vec2(1.0, -2.0);
        let mut st = SgdState::new(&theta, 0.9, 0.0).unwrap();
        sgd_step(&mut st, &mut theta, &grad, 0.1).unwrap();
        let after_first = theta.clone();
        sgd_step(&mut st, &mut theta, &grad, 0.1).unwrap();
        let second_update: Vec<f64> = after_first
            .data()
            .iter()
            .zip(theta.data())
            .map(|(a, b)| a - b)
            .collect();
        assert!((second_update[0] - 0.1 * 1.9).abs() < 1e-15);
        assert!((second_update[1] + 0.2 * 1.9).abs() < 1e-15);
    }

    #[test]
    fn pure_decay() {
        let mut theta = vec2(1.0, 0.0);
        let grad = vec2(0.0, 0.0);
        let mut st = SgdState::new(&theta, 0.0, 0.1).unwrap();
        sgd_step(&mut st, &mut theta, &grad, 1.0).unwrap();
        assert_eq!(theta.data(), &[0.9, 0.0]);
    }

    #[test]
    fn plain_step_equals_theta_minus_lr_grad() {
        let mut theta = vec2(0.3, -0.7);
        let grad = vec2(0.11, 0.23);
        let mut st = SgdState::new(&theta, 0.0, 0.0).unwrap();
        sgd_step(&mut st, &mut theta, &grad, 0.5).unwrap();
        assert_eq!(theta.data(), &[0.3 - 0.5 * 0.11, -0.7 - 0.5 * 0.23]);
    }

    #[test]
    fn schedule_values() {
        let s = LrSchedule { base_lr: 0.02, milestones: vec![80, 150, 200], gamma: 0.5 };
        s.validate().unwrap();
        assert_eq!(lr_at(&s, 0), 0.02);
        assert_eq!(lr_at(&s, 79), 0.02);
        assert_eq!(lr_at(&s, 80), 0.01); // milestone inclusive
        assert_eq!(lr_at(&s, 160), 0.005); // 0.02 * 0.5^2
        assert_eq!(lr_at(&s, 500), 0.0025);
        let c = LrSchedule::constant(0.1);
        assert_eq!(lr_at(&c, 999), 0.1);
    }

    #[test]
    fn schedule_non_increasing() {
        let s = LrSchedule { base_lr: 0.1, milestones: vec![3, 5, 9], gamma: 0.7 };
        let mut prev = f64::INFINITY;
        for e in 0..20 {
            let lr = lr_at(&s, e);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn bad_configs_rejected() {
        let theta = vec2(0.0, 0.0);
        assert!(SgdState::new(&theta, 1.0, 0.0).is_err());
        assert!(SgdState::new(&theta, -0.1, 0.0).is_err());
        let s = LrSchedule { base_lr: 0.1, milestones: vec![5, 5], gamma: 0.5 };
        assert!(s.validate().is_err());
    }
}
