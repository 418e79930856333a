use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::gap::{gap_report, GapReport, GapWeights};
use crate::bilevel::{retrain_phase, search_phase, train_single_loop, Checkpointer, Mode, Phase, TrajectoryLog};
use crate::error::{Error, Result};
use crate::harness::{
    make_cluster_task, make_teacher_task, pretrain_base, split, AdapterModel, AdapterSpec, BaseNetwork, Dataset,
    ModelShape, TaskKind,
};
use crate::runner::spec::{ExperimentSpec, Method, TaskFamily};

pub const CONFIG_FILE: &str = "config.toml";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub iterations: usize,
    pub stopped_early: bool,
    pub initial_val_metric: Option<f64>,
    pub best_val_metric: Option<f64>,
}

/// Final numbers of one run, written as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: Method,
    pub mode: Mode,
    pub seed: u64,
    pub task: TaskFamily,
    /// `accuracy` or `mse`.
    pub metric: String,
    pub initial_test_metric: f64,
    pub test_metric: f64,
    pub test_loss: f64,
    /// Metric on the whole target training set.
    pub train_metric: f64,
    pub train_loss: f64,
    pub gap: GapReport,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub search: Option<SearchSummary>,
    /// Retraining steps (bi-level) or training steps (single loop) taken.
    pub steps: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: RunMetrics,
    pub log: TrajectoryLog,
    pub model: AdapterModel,
    pub base: BaseNetwork,
}

/// Pretraining, target, and test data plus the network shape for `spec`'s task.
pub fn build_task(spec: &ExperimentSpec, seed: u64) -> Result<(Dataset, Dataset, Dataset, ModelShape)> {
    let (pretrain, target, test, input_dim, output_dim) = match spec.task.kind {
        TaskFamily::Cluster => {
            let t = make_cluster_task(&spec.task.cluster, seed)?;
            let c = &spec.task.cluster;
            (t.pretrain, t.target, t.test, c.dim, c.num_classes)
        }
        TaskFamily::Teacher => {
            let t = make_teacher_task(&spec.task.teacher, seed)?;
            (t.pretrain, t.target, t.test, spec.task.teacher.dim, 1)
        }
    };
    let shape = ModelShape {
        input_dim,
        hidden: spec.model.hidden.clone(),
        output_dim,
    };
    Ok((pretrain, target, test, shape))
}

/// Runs `spec` for `seed`: pretrain, wrap, then either search plus retraining
/// (bidora) or single-loop training. With `dir`, checkpoints go to
/// `dir/checkpoints`.
pub fn run_once(spec: &ExperimentSpec, seed: u64, dir: Option<&Path>) -> Result<RunResult> {
    let spec = spec.for_seed(seed);
    spec.validate()?;
    let cfg = &spec.train;
    let (pretrain, target, test, shape) = build_task(&spec, seed)?;
    let base = pretrain_base(&shape, &pretrain, spec.model.pretrain_steps, seed)?;
    let adapter = AdapterSpec {
        mode: spec.method.adapter_mode(),
        rank: spec.model.rank,
        alpha: spec.model.alpha,
        dropout: spec.model.dropout,
        detach_norm: spec.model.detach_norm,
    };
    let mut model = AdapterModel::from_base(&base, &adapter, seed)?;
    let initial_test_metric = model.evaluate(&test)?.metric;
    let ckpt_dir = dir.map(|d| d.join(CHECKPOINT_DIR));
    let mut log = TrajectoryLog::new();

    let (search, steps, stopped_early, n_train, n_val) = if spec.method == Method::Bidora {
        let retrain_budget = if cfg.mode == Mode::NoRetrain {
            0
        } else {
            cfg.retrain_steps
        };
        let mut ckpt = Checkpointer::new(cfg.search_steps + retrain_budget, ckpt_dir.clone());
        ckpt.snapshot("init", 0, Phase::Search, &model, &mut log)?;
        let (d_tr, d_val) = if cfg.has_validation() {
            let s = split(&target, cfg.split_ratio, seed)?;
            (s.train, Some(s.val))
        } else {
            (target.clone(), None)
        };
        let searched = search_phase(&mut model, cfg, &d_tr, d_val.as_ref(), &mut log, &mut ckpt)?;
        let union = match &d_val {
            Some(v) => d_tr.concat(v)?,
            None => d_tr.clone(),
        };
        let retrained = retrain_phase(
            &mut model,
            cfg,
            &union,
            Some(&test),
            searched.iterations,
            &mut log,
            &mut ckpt,
        )?;
        let end = searched.iterations + retrained.steps;
        let phase = if retrained.steps > 0 {
            Phase::Retrain
        } else {
            Phase::Search
        };
        ckpt.finish(end, phase, &model, &mut log)?;
        ckpt.snapshot("final", end, phase, &model, &mut log)?;
        let summary = SearchSummary {
            iterations: searched.iterations,
            stopped_early: searched.stopped_early,
            initial_val_metric: searched.initial_val_metric,
            best_val_metric: searched.best_val_metric,
        };
        let n_val = d_val.as_ref().map_or(0, Dataset::len);
        (
            Some(summary),
            retrained.steps,
            retrained.stopped_early,
            d_tr.len(),
            n_val,
        )
    } else {
        let mut ckpt = Checkpointer::new(cfg.train_steps, ckpt_dir.clone());
        ckpt.snapshot("init", 0, Phase::Train, &model, &mut log)?;
        let out = train_single_loop(&mut model, cfg, &target, Some(&test), &mut log, &mut ckpt)?;
        ckpt.finish(out.steps, Phase::Train, &model, &mut log)?;
        ckpt.snapshot("final", out.steps, Phase::Train, &model, &mut log)?;
        (None, out.steps, out.stopped_early, target.len(), 0)
    };

    let test_eval = model.evaluate(&test)?;
    let train_eval = model.evaluate(&target)?;
    let gap = if log.train_metrics().is_empty() {
        // No training step ran; fall back to the full-set training metric.
        GapReport {
            train_metric: train_eval.metric,
            test_metric: test_eval.metric,
            gap: train_eval.metric - test_eval.metric,
            inner: None,
            outer: None,
            weights: None,
        }
    } else {
        gap_report(&log, test_eval.metric, GapWeights::default())?
    };
    let metrics = RunMetrics {
        method: spec.method,
        mode: cfg.mode,
        seed,
        task: spec.task.kind,
        metric: match model.kind() {
            TaskKind::Classification => "accuracy".into(),
            TaskKind::Regression => "mse".into(),
        },
        initial_test_metric,
        test_metric: test_eval.metric,
        test_loss: test_eval.loss,
        train_metric: train_eval.metric,
        train_loss: train_eval.loss,
        gap,
        n_train,
        n_val,
        n_test: test.len(),
        search,
        steps,
        stopped_early,
    };
    Ok(RunResult {
        metrics,
        log,
        model,
        base,
    })
}

/// Directory of one seed's run under the spec's output root.
pub fn run_dir(spec: &ExperimentSpec, seed: u64) -> PathBuf {
    spec.out.join(spec.label()).join(format!("seed-{seed}"))
}

/// Runs every seed of `spec`, writing for each a directory with the config
/// echo, trajectory log, checkpoints, and final metrics.
pub fn cmd_train(spec: &ExperimentSpec) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let mut dirs = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let dir = run_dir(spec, seed);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(CONFIG_FILE), spec.for_seed(seed).to_toml()?)?;
        let result = run_once(spec, seed, Some(&dir)).map_err(|e| e.at(format!("{} seed {seed}", spec.label())))?;
        result.log.write(&dir.join(TRAJECTORY_FILE))?;
        write_metrics(&dir.join(METRICS_FILE), &result.metrics)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

pub fn write_metrics(path: &Path, metrics: &RunMetrics) -> Result<()> {
    let mut text = serde_json::to_string_pretty(metrics)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<RunMetrics> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
