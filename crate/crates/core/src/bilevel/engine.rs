use crate::bilevel::config::BilevelConfig;
use crate::bilevel::hypergrad::{hypergradient, Hypergradient};
use crate::bilevel::optim::{scheduled_lr, OptimizerState, Schedule};
use crate::bilevel::problem::Bilevel;
use crate::error::{Error, Result};

/// Optimizer state plus learning-rate schedule for one parameter group.
#[derive(Debug, Clone)]
pub struct LevelOptimizer {
    state: OptimizerState,
    lr: f64,
    total: usize,
    taken: usize,
    schedule: Schedule,
    warmup_ratio: f64,
}

impl LevelOptimizer {
    pub fn new(cfg: &BilevelConfig, numel: usize, lr: f64, weight_decay: f64, total: usize) -> Self {
        Self {
            state: OptimizerState::new(cfg.optimizer, numel, weight_decay, cfg.adam),
            lr,
            total,
            taken: 0,
            schedule: cfg.schedule,
            warmup_ratio: cfg.warmup_ratio,
        }
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        scheduled_lr(self.schedule, self.lr, self.taken, self.total, self.warmup_ratio)
    }

    pub fn steps_taken(&self) -> usize {
        self.taken
    }

    /// Applies one step and returns the norm of the parameter change.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) -> Result<f64> {
        let lr = self.current_lr();
        self.taken += 1;
        self.state.step(params, grad, lr)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowerReport {
    /// `L_tr` before the step.
    pub loss: f64,
    pub task_loss: f64,
    /// Unweighted regularizer value before the step.
    pub reg: f64,
    /// Batch metric before the step.
    pub metric: f64,
    pub update_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpperReport {
    /// `L_val` before the step (at the unrolled directions).
    pub val_loss: f64,
    pub val_metric: f64,
    pub hyper: Hypergradient,
    pub update_norm: f64,
}

fn ensure_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// One step of either level, with per-level optimizers.
#[derive(Debug, Clone)]
pub struct Engine {
    cfg: BilevelConfig,
    pub upper: LevelOptimizer,
    pub lower: LevelOptimizer,
}

impl Engine {
    /// Optimizers sized for `problem`, scheduled over `search_steps`.
    pub fn new<P: Bilevel>(problem: &P, cfg: &BilevelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            upper: LevelOptimizer::new(
                cfg,
                problem.upper_params().len(),
                cfg.upper_lr,
                cfg.upper_wd,
                cfg.search_steps,
            ),
            lower: LevelOptimizer::new(
                cfg,
                problem.lower_params().len(),
                cfg.lower_lr,
                cfg.lower_wd,
                cfg.search_steps,
            ),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &BilevelConfig {
        &self.cfg
    }

    /// One optimizer step on the directions against `L_tr = task + gamma R`,
    /// magnitudes held fixed.
    pub fn lower_step<P: Bilevel>(&mut self, problem: &mut P, batch_tr: &P::Batch) -> Result<LowerReport> {
        let eval = problem.train_objective(batch_tr, self.cfg.gamma())?;
        ensure_finite(eval.loss, "training loss")?;
        let mut v = problem.lower_params();
        let update_norm = self.lower.apply(&mut v, &eval.grad_lower)?;
        problem.set_lower_params(&v)?;
        Ok(LowerReport {
            loss: eval.loss,
            task_loss: eval.task_loss,
            reg: eval.reg,
            metric: eval.metric,
            update_norm,
        })
    }

    /// One optimizer step on the magnitudes along the unrolled hypergradient
    /// (the plain validation gradient in `xi_zero` mode), directions held fixed.
    pub fn upper_step<P: Bilevel>(
        &mut self,
        problem: &mut P,
        batch_tr: &P::Batch,
        batch_val: &P::Batch,
    ) -> Result<UpperReport> {
        let hyper = hypergradient(
            problem,
            batch_tr,
            batch_val,
            self.cfg.xi(),
            self.cfg.gamma(),
            self.cfg.eps0,
        )?;
        ensure_finite(hyper.val_loss, "validation loss")?;
        let mut m = problem.upper_params();
        let update_norm = self.upper.apply(&mut m, &hyper.grad)?;
        problem.set_upper_params(&m)?;
        Ok(UpperReport {
            val_loss: hyper.val_loss,
            val_metric: hyper.val_metric,
            hyper,
            update_norm,
        })
    }
}
