use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    Adamw,
    /// Plain gradient descent, with the same decoupled weight decay.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear warmup over the first `warmup_ratio` of the budget, then linear
    /// decay to zero at the end of the budget.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate at 0-based `step` out of `total` for a base rate `lr`.
pub fn scheduled_lr(schedule: Schedule, lr: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    match schedule {
        Schedule::Constant => lr,
        Schedule::Linear => {
            if total == 0 {
                return lr;
            }
            let warmup = (warmup_ratio * total as f64).ceil() as usize;
            if step < warmup {
                lr * (step + 1) as f64 / warmup as f64
            } else {
                let remaining = total.saturating_sub(step) as f64;
                lr * remaining / (total - warmup).max(1) as f64
            }
        }
    }
}

/// Moment buffers for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    adam: AdamParams,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, numel: usize, weight_decay: f64, adam: AdamParams) -> Self {
        Self {
            kind,
            adam,
            weight_decay,
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn numel(&self) -> usize {
        self.m.len()
    }

    /// Updates `params` in place and returns the Euclidean norm of the change.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<f64> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "optimizer step",
                lhs: (params.len(), 1),
                rhs: (grad.len(), 1),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let decay = 1.0 - lr * self.weight_decay;
        let mut change = 0.0;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    let old = *p;
                    *p = *p * decay - lr * g;
                    change += (*p - old) * (*p - old);
                }
            }
            OptimizerKind::Adamw => {
                let AdamParams { beta1, beta2, eps } = self.adam;
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    let old = params[i];
                    params[i] = old * decay - lr * m_hat / (v_hat.sqrt() + eps);
                    change += (params[i] - old) * (params[i] - old);
                }
            }
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("parameters after optimizer step".into()));
        }
        Ok(change.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_unit_step_solves_scalar_quadratic() {
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 1, 0.0, AdamParams::default());
        let mut v = [0.0];
        let grad = [v[0] - 3.0];
        opt.step(&mut v, &grad, 1.0).unwrap();
        assert_eq!(v[0], 3.0);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adamw] {
            let mut opt = OptimizerState::new(kind, 2, 0.1, AdamParams::default());
            let mut p = [1.5, -2.0];
            let n = opt.step(&mut p, &[0.3, 7.0], 0.0).unwrap();
            assert_eq!(p, [1.5, -2.0]);
            assert_eq!(n, 0.0);
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut opt = OptimizerState::new(OptimizerKind::Adamw, 1, 0.0, AdamParams::default());
        let mut p = [0.0];
        opt.step(&mut p, &[4.0], 0.1).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_ignores_gradient_scale() {
        let mut opt = OptimizerState::new(OptimizerKind::Adamw, 1, 0.5, AdamParams::default());
        let mut p = [2.0];
        opt.step(&mut p, &[0.0], 0.1).unwrap();
        assert!((p[0] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn linear_schedule_shape() {
        let lr = |s| scheduled_lr(Schedule::Linear, 1.0, s, 100, 0.06);
        assert!((lr(0) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(lr(5), 1.0);
        assert!((lr(6) - 94.0 / 94.0).abs() < 1e-15);
        assert!((lr(53) - 47.0 / 94.0).abs() < 1e-15);
        assert!(lr(99) > 0.0);
        assert_eq!(scheduled_lr(Schedule::Constant, 0.3, 99, 100, 0.06), 0.3);
    }
}
