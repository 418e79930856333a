use std::fs;
use std::path::PathBuf;

use crate::analysis::wda::model_wda;
use crate::bilevel::config::{BilevelConfig, Mode};
use crate::bilevel::engine::{Engine, LevelOptimizer};
use crate::bilevel::problem::Bilevel;
use crate::bilevel::trajectory::{Event, Phase, TrajectoryLog};
use crate::error::Result;
use crate::harness::dataset::{BatchSampler, Dataset, TaskKind};
use crate::harness::model::{AdapterModel, ModelBatch};
use crate::rng::{derive_seed, stream};

/// Training snapshots at fixed fractions of a step budget. Each snapshot
/// records per-layer magnitude/direction changes in the log and, with a
/// directory set, writes the adapter layers to `<dir>/<label>.json`.
#[derive(Debug, Clone)]
pub struct Checkpointer {
    dir: Option<PathBuf>,
    plan: Vec<(usize, String)>,
    next: usize,
}

impl Checkpointer {
    pub const FRACTIONS: [(f64, &'static str); 4] = [(0.25, "p25"), (0.5, "p50"), (0.75, "p75"), (1.0, "p100")];

    /// Snapshots after `ceil(f * budget)` steps for each fraction `f`.
    pub fn new(budget: usize, dir: Option<PathBuf>) -> Self {
        let plan = Self::FRACTIONS
            .iter()
            .map(|&(f, label)| (((f * budget as f64).ceil() as usize).max(1), label.to_string()))
            .collect();
        Self { dir, plan, next: 0 }
    }

    pub fn disabled() -> Self {
        Self {
            dir: None,
            plan: Vec::new(),
            next: 0,
        }
    }

    fn write(
        &self,
        label: &str,
        step: usize,
        phase: Phase,
        model: &AdapterModel,
        log: &mut TrajectoryLog,
    ) -> Result<()> {
        let file = match &self.dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                model.save(&dir.join(format!("{label}.json")))?;
                Some(format!("{label}.json"))
            }
            None => None,
        };
        log.push(
            step,
            phase,
            Event::Checkpoint {
                label: label.to_string(),
                file,
                wda: model_wda(model.layers())?,
            },
        );
        Ok(())
    }

    /// Snapshot labelled `label` regardless of the plan.
    pub fn snapshot(
        &self,
        label: &str,
        step: usize,
        phase: Phase,
        model: &AdapterModel,
        log: &mut TrajectoryLog,
    ) -> Result<()> {
        self.write(label, step, phase, model, log)
    }

    /// Called after `step` completed steps of the budget.
    pub fn after_step(
        &mut self,
        step: usize,
        phase: Phase,
        model: &AdapterModel,
        log: &mut TrajectoryLog,
    ) -> Result<()> {
        while self.next < self.plan.len() && self.plan[self.next].0 <= step {
            let label = self.plan[self.next].1.clone();
            self.write(&label, step, phase, model, log)?;
            self.next += 1;
        }
        Ok(())
    }

    /// Writes the planned snapshots not reached because training stopped early.
    pub fn finish(&mut self, step: usize, phase: Phase, model: &AdapterModel, log: &mut TrajectoryLog) -> Result<()> {
        while self.next < self.plan.len() {
            let label = self.plan[self.next].1.clone();
            self.write(&label, step, phase, model, log)?;
            self.next += 1;
        }
        Ok(())
    }
}

fn improves(kind: TaskKind, candidate: f64, best: f64) -> bool {
    match kind {
        TaskKind::Classification => candidate > best,
        TaskKind::Regression => candidate < best,
    }
}

/// Tracks the best full-split metric and the parameters that achieved it.
struct EarlyStop {
    kind: TaskKind,
    patience: usize,
    best: f64,
    best_upper: Vec<f64>,
    best_lower: Vec<f64>,
    misses: usize,
}

impl EarlyStop {
    fn new(kind: TaskKind, patience: usize, initial: f64, model: &AdapterModel) -> Self {
        Self {
            kind,
            patience,
            best: initial,
            best_upper: model.upper_params(),
            best_lower: model.lower_params(),
            misses: 0,
        }
    }

    /// Returns true when patience is exhausted.
    fn observe(&mut self, metric: f64, model: &AdapterModel) -> bool {
        if improves(self.kind, metric, self.best) {
            self.best = metric;
            self.best_upper = model.upper_params();
            self.best_lower = model.lower_params();
            self.misses = 0;
        } else {
            self.misses += 1;
        }
        self.patience > 0 && self.misses >= self.patience
    }

    fn restore(&self, model: &mut AdapterModel) -> Result<()> {
        model.set_upper_params(&self.best_upper)?;
        model.set_lower_params(&self.best_lower)
    }
}

fn mask_seed(seed: u64, phase: Phase, step: usize) -> u64 {
    let tag = match phase {
        Phase::Search => 0,
        Phase::Retrain => 1,
        Phase::Train => 2,
    };
    derive_seed(derive_seed(seed, stream::DROPOUT), (tag << 32) | step as u64)
}

fn eval_event(model: &AdapterModel, data: &Dataset, split: &str) -> Result<(f64, Event)> {
    let r = model.evaluate(data)?;
    Ok((
        r.metric,
        Event::Eval {
            split: split.to_string(),
            metric: r.metric,
            loss: r.loss,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// Magnitudes at the best validation evaluation (the final ones without
    /// validation data).
    pub magnitudes: Vec<f64>,
    pub iterations: usize,
    pub stopped_early: bool,
    pub initial_val_metric: Option<f64>,
    pub best_val_metric: Option<f64>,
}

/// Alternates one upper step and one lower step per iteration. Without
/// validation data the upper level is never updated. With it, the full
/// validation split is evaluated every `eval_every` iterations; the search
/// stops after `patience` evaluations without improvement and the model is
/// returned to its best evaluated state.
pub fn search_phase(
    model: &mut AdapterModel,
    cfg: &BilevelConfig,
    d_tr: &Dataset,
    d_val: Option<&Dataset>,
    log: &mut TrajectoryLog,
    ckpt: &mut Checkpointer,
) -> Result<SearchOutcome> {
    let mut engine = Engine::new(model, cfg)?;
    let mut sampler_tr = BatchSampler::new(d_tr.len(), cfg.batch_size, cfg.seed, stream::BATCH_TRAIN)?;
    let mut sampler_val = match d_val {
        Some(v) => Some(BatchSampler::new(v.len(), cfg.batch_size, cfg.seed, stream::BATCH_VAL)?),
        None => None,
    };
    let mut early = match d_val {
        Some(v) => {
            let (metric, event) = eval_event(model, v, "val")?;
            log.push(0, Phase::Search, event);
            Some(EarlyStop::new(model.kind(), cfg.patience, metric, model))
        }
        None => None,
    };
    let initial_val_metric = early.as_ref().map(|e| e.best);
    let mut iterations = 0;
    let mut stopped_early = false;
    for it in 0..cfg.search_steps {
        let ctx = |e: crate::error::Error| e.at(format!("search iteration {it}"));
        let batch_tr = ModelBatch {
            data: sampler_tr.next_batch(d_tr),
            mask_seed: mask_seed(cfg.seed, Phase::Search, it),
        };
        if let (Some(val), Some(sampler)) = (d_val, sampler_val.as_mut()) {
            let batch_val = ModelBatch {
                data: sampler.next_batch(val),
                mask_seed: 0,
            };
            let up = engine.upper_step(model, &batch_tr, &batch_val).map_err(ctx)?;
            log.push(
                it,
                Phase::Search,
                Event::Upper {
                    loss_val: up.val_loss,
                    val_metric: up.val_metric,
                    loss_tr: up.hyper.train_loss,
                    xi: up.hyper.xi,
                    direct_norm: crate::bilevel::hypergrad::norm(&up.hyper.direct),
                    curvature_norm: up.hyper.curvature_norm(),
                    eps: up.hyper.eps,
                    probe_norm: up.hyper.probe_norm,
                    update_norm: up.update_norm,
                },
            );
        }
        let low = engine.lower_step(model, &batch_tr).map_err(ctx)?;
        log.push(
            it,
            Phase::Search,
            Event::Train {
                loss_tr: low.loss,
                task_loss: low.task_loss,
                reg_value: low.reg,
                gamma: cfg.gamma(),
                metric: low.metric,
                lower_update_norm: low.update_norm,
                upper_update_norm: 0.0,
            },
        );
        iterations = it + 1;
        ckpt.after_step(iterations, Phase::Search, model, log)?;
        if let (Some(val), Some(es)) = (d_val, early.as_mut()) {
            if iterations % cfg.eval_every == 0 {
                let (metric, event) = eval_event(model, val, "val")?;
                log.push(iterations, Phase::Search, event);
                if es.observe(metric, model) {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some(es) = &early {
        es.restore(model)?;
    }
    Ok(SearchOutcome {
        magnitudes: model.upper_params(),
        iterations,
        stopped_early,
        initial_val_metric,
        best_val_metric: early.map(|e| e.best),
    })
}

/// Which parameters a supervised loop updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub upper: bool,
    pub lower: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub steps: usize,
    pub stopped_early: bool,
    pub initial_test_metric: Option<f64>,
    pub best_test_metric: Option<f64>,
}

struct LoopSpec<'a> {
    phase: Phase,
    step_offset: usize,
    steps: usize,
    trainable: Trainable,
    upper_lr: f64,
    upper_wd: f64,
    lower_lr: f64,
    gamma: f64,
    stream: u64,
    data: &'a Dataset,
    test: Option<&'a Dataset>,
}

fn supervised_loop(
    model: &mut AdapterModel,
    cfg: &BilevelConfig,
    spec: LoopSpec<'_>,
    log: &mut TrajectoryLog,
    ckpt: &mut Checkpointer,
) -> Result<LoopOutcome> {
    let mut upper_opt = LevelOptimizer::new(
        cfg,
        model.upper_params().len(),
        spec.upper_lr,
        spec.upper_wd,
        spec.steps,
    );
    let mut lower_opt = LevelOptimizer::new(cfg, model.lower_params().len(), spec.lower_lr, cfg.lower_wd, spec.steps);
    let mut sampler = BatchSampler::new(spec.data.len(), cfg.batch_size, cfg.seed, spec.stream)?;
    let mut early = match spec.test {
        Some(t) => {
            let (metric, event) = eval_event(model, t, "test")?;
            log.push(spec.step_offset, spec.phase, event);
            Some(EarlyStop::new(model.kind(), cfg.patience, metric, model))
        }
        None => None,
    };
    let initial_test_metric = early.as_ref().map(|e| e.best);
    let mut steps = 0;
    let mut stopped_early = false;
    for s in 0..spec.steps {
        let global = spec.step_offset + s;
        let ctx = |e: crate::error::Error| e.at(format!("{:?} step {s}", spec.phase).to_lowercase());
        let batch = ModelBatch {
            data: sampler.next_batch(spec.data),
            mask_seed: mask_seed(cfg.seed, spec.phase, s),
        };
        let eval = model.train_objective(&batch, spec.gamma).map_err(ctx)?;
        if !eval.loss.is_finite() {
            return Err(ctx(crate::error::Error::NonFinite("training loss".into())));
        }
        let mut upper_update_norm = 0.0;
        let mut lower_update_norm = 0.0;
        if spec.trainable.upper && !eval.grad_upper.is_empty() {
            let mut m = model.upper_params();
            upper_update_norm = upper_opt.apply(&mut m, &eval.grad_upper).map_err(ctx)?;
            model.set_upper_params(&m)?;
        }
        if spec.trainable.lower {
            let mut v = model.lower_params();
            lower_update_norm = lower_opt.apply(&mut v, &eval.grad_lower).map_err(ctx)?;
            model.set_lower_params(&v)?;
        }
        log.push(
            global,
            spec.phase,
            Event::Train {
                loss_tr: eval.loss,
                task_loss: eval.task_loss,
                reg_value: eval.reg,
                gamma: spec.gamma,
                metric: eval.metric,
                lower_update_norm,
                upper_update_norm,
            },
        );
        steps = s + 1;
        ckpt.after_step(global + 1, spec.phase, model, log)?;
        if let (Some(test), Some(es)) = (spec.test, early.as_mut()) {
            if steps % cfg.eval_every == 0 {
                let (metric, event) = eval_event(model, test, "test")?;
                log.push(global + 1, spec.phase, event);
                if es.observe(metric, model) {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some(es) = &early {
        es.restore(model)?;
    }
    Ok(LoopOutcome {
        steps,
        stopped_early,
        initial_test_metric,
        best_test_metric: early.map(|e| e.best),
    })
}

/// Trains on the union split with magnitudes frozen at their searched values
/// (or, in `retrain_magnitude` mode, the magnitudes with directions frozen).
/// Directions are warm-started unless `retrain_from_scratch` is set. With a
/// test set, training stops early on its metric and the best state is kept.
/// Does nothing in `no_retrain` mode.
pub fn retrain_phase(
    model: &mut AdapterModel,
    cfg: &BilevelConfig,
    union: &Dataset,
    test: Option<&Dataset>,
    step_offset: usize,
    log: &mut TrajectoryLog,
    ckpt: &mut Checkpointer,
) -> Result<LoopOutcome> {
    if cfg.mode == Mode::NoRetrain {
        return Ok(LoopOutcome {
            steps: 0,
            stopped_early: false,
            initial_test_metric: None,
            best_test_metric: None,
        });
    }
    cfg.validate()?;
    let magnitude_only = cfg.mode == Mode::RetrainMagnitude;
    if cfg.retrain_from_scratch && !magnitude_only {
        model.reset_directions(cfg.seed);
    }
    let spec = LoopSpec {
        phase: Phase::Retrain,
        step_offset,
        steps: cfg.retrain_steps,
        trainable: Trainable {
            upper: magnitude_only,
            lower: !magnitude_only,
        },
        upper_lr: cfg.upper_lr,
        upper_wd: cfg.upper_wd,
        lower_lr: cfg.retrain_lr(),
        gamma: cfg.gamma(),
        stream: stream::BATCH_RETRAIN,
        data: union,
        test,
    };
    supervised_loop(model, cfg, spec, log, ckpt)
}

/// Single-loop baseline: every trainable tensor updated together on `data`
/// with `lower_lr` for `train_steps`, without the Gram penalty.
pub fn train_single_loop(
    model: &mut AdapterModel,
    cfg: &BilevelConfig,
    data: &Dataset,
    test: Option<&Dataset>,
    log: &mut TrajectoryLog,
    ckpt: &mut Checkpointer,
) -> Result<LoopOutcome> {
    cfg.validate()?;
    let spec = LoopSpec {
        phase: Phase::Train,
        step_offset: 0,
        steps: cfg.train_steps,
        trainable: Trainable {
            upper: true,
            lower: true,
        },
        upper_lr: cfg.lower_lr,
        upper_wd: cfg.lower_wd,
        lower_lr: cfg.lower_lr,
        gamma: 0.0,
        stream: stream::BATCH_TRAIN,
        data,
        test,
    };
    supervised_loop(model, cfg, spec, log, ckpt)
}
