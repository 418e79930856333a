use serde::{Deserialize, Serialize};

use crate::bilevel::optim::{AdamParams, OptimizerKind, Schedule};
use crate::error::{Error, Result};

/// Ablation variants of the two-phase procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    /// Skip the retraining phase.
    NoRetrain,
    /// Drop the unrolled curvature term: the upper level descends
    /// `grad_M L_val(V, M)` directly.
    XiZero,
    /// Train the lower level without the Gram penalty.
    NoReg,
    /// Retrain the magnitudes on the union split with directions frozen.
    RetrainMagnitude,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Full,
        Mode::NoRetrain,
        Mode::XiZero,
        Mode::NoReg,
        Mode::RetrainMagnitude,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoRetrain => "no_retrain",
            Mode::XiZero => "xi_zero",
            Mode::NoReg => "no_reg",
            Mode::RetrainMagnitude => "retrain_magnitude",
        }
    }

    pub fn parse(name: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == name.replace('-', "_"))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mode {name:?}")))
    }
}

/// Every scalar of the two-level training procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BilevelConfig {
    /// Unroll step size; defaults to `lower_lr`.
    pub xi: Option<f64>,
    /// Finite-difference scale numerator: `eps = eps0 / ||g||`.
    pub eps0: f64,
    pub gamma: f64,
    pub upper_lr: f64,
    pub lower_lr: f64,
    /// Defaults to `lower_lr`.
    pub retrain_lr: Option<f64>,
    pub upper_wd: f64,
    pub lower_wd: f64,
    /// Fraction of the target set used as the lower-level training split.
    /// `1.0` leaves no validation data and the upper level is never updated.
    pub split_ratio: f64,
    pub search_steps: usize,
    pub retrain_steps: usize,
    /// Step budget of single-loop baselines.
    pub train_steps: usize,
    pub batch_size: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Outer iterations between full-split evaluations.
    pub eval_every: usize,
    pub mode: Mode,
    pub retrain_from_scratch: bool,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub warmup_ratio: f64,
    pub adam: AdamParams,
    pub seed: u64,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        Self {
            xi: None,
            eps0: 0.01,
            gamma: 1e-5,
            upper_lr: 5e-3,
            lower_lr: 5e-3,
            retrain_lr: None,
            upper_wd: 0.01,
            lower_wd: 0.01,
            split_ratio: 0.8,
            search_steps: 1000,
            retrain_steps: 500,
            train_steps: 1500,
            batch_size: 32,
            patience: 5,
            eval_every: 100,
            mode: Mode::Full,
            retrain_from_scratch: false,
            optimizer: OptimizerKind::Adamw,
            schedule: Schedule::Linear,
            warmup_ratio: 0.06,
            adam: AdamParams::default(),
            seed: 0,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let rates = [
            ("upper_lr", self.upper_lr),
            ("lower_lr", self.lower_lr),
            ("retrain_lr", self.retrain_lr()),
            ("xi", self.xi()),
            ("upper_wd", self.upper_wd),
            ("lower_wd", self.lower_wd),
            ("gamma", self.gamma),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.eps0.is_finite() && self.eps0 > 0.0) {
            return bad(format!("eps0 must be > 0, got {}", self.eps0));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio <= 1.0) {
            return bad(format!("split_ratio must lie in (0, 1], got {}", self.split_ratio));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio must lie in [0, 1), got {}", self.warmup_ratio));
        }
        let AdamParams { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be > 0".into());
        }
        Ok(())
    }

    /// Unroll step: zero in `xi_zero` mode, otherwise `xi` or `lower_lr`.
    pub fn xi(&self) -> f64 {
        match self.mode {
            Mode::XiZero => 0.0,
            _ => self.xi.unwrap_or(self.lower_lr),
        }
    }

    /// Regularizer weight: zero in `no_reg` mode.
    pub fn gamma(&self) -> f64 {
        match self.mode {
            Mode::NoReg => 0.0,
            _ => self.gamma,
        }
    }

    pub fn retrain_lr(&self) -> f64 {
        self.retrain_lr.unwrap_or(self.lower_lr)
    }

    pub fn has_validation(&self) -> bool {
        self.split_ratio < 1.0
    }
}
