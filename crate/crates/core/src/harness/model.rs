use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{gram_penalty_var, save_layers, AdapterLayer, AdapterMode, LayerVars, ParamGroup, ParamKind};
use crate::autodiff::{Graph, Tensor, Var};
use crate::bilevel::problem::{Bilevel, Evaluation};
use crate::error::{Error, Result};
use crate::harness::dataset::{Dataset, Targets, TaskKind};
use crate::harness::tasks::{accuracy, BaseNetwork};
use crate::rng::{rng_for, stream};

/// How every linear layer of the base network is wrapped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSpec {
    pub mode: AdapterMode,
    /// Requested rank; clamped per layer to `min(d, k)`.
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub detach_norm: bool,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            mode: AdapterMode::Dora,
            rank: 4,
            alpha: 8.0,
            dropout: 0.0,
            detach_norm: false,
        }
    }
}

/// Accuracy (classification) or mean squared error (regression), plus the
/// mean task loss, over a whole dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: f64,
    pub loss: f64,
}

/// A batch plus the seed of its adapter-path dropout masks. Reusing a batch
/// reuses its masks, so repeated objective evaluations see the same function.
#[derive(Debug, Clone)]
pub struct ModelBatch {
    pub data: Dataset,
    pub mask_seed: u64,
}

/// Adapter-wrapped layers with relu between them. Only adapter tensors are
/// trainable; base weights and biases are frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModel {
    layers: Vec<AdapterLayer>,
    kind: TaskKind,
    upper: ParamGroup,
    lower: ParamGroup,
}

impl AdapterModel {
    pub fn from_base(base: &BaseNetwork, spec: &AdapterSpec, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, stream::ADAPTER_INIT);
        let layers = base
            .layers
            .iter()
            .map(|l| {
                let (d, k) = l.weight.shape();
                AdapterLayer::new(
                    l.weight.clone(),
                    l.bias.clone(),
                    spec.mode,
                    spec.rank.min(d.min(k)),
                    spec.alpha,
                    &mut rng,
                )?
                .with_dropout(spec.dropout)
                .map(|l| l.with_detach_norm(spec.detach_norm))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, base.kind)
    }

    pub fn from_layers(layers: Vec<AdapterLayer>, kind: TaskKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::ShapeMismatch {
                    op: "layer chain",
                    lhs: w[0].base().shape(),
                    rhs: w[1].base().shape(),
                });
            }
        }
        Ok(Self {
            upper: ParamGroup::upper(&layers),
            lower: ParamGroup::lower(&layers),
            layers,
            kind,
        })
    }

    pub fn layers(&self) -> &[AdapterLayer] {
        &self.layers
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn upper_group(&self) -> &ParamGroup {
        &self.upper
    }

    pub fn lower_group(&self) -> &ParamGroup {
        &self.lower
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Re-draws every direction factor (`B = 0`, fresh `A`) from `seed`.
    pub fn reset_directions(&mut self, seed: u64) {
        let mut rng = rng_for(seed, stream::REINIT);
        for l in &mut self.layers {
            l.reset_direction(&mut rng);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_layers(path, &self.layers)
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: (data.len(), data.dim()),
                rhs: self.layers[0].base().shape(),
            });
        }
        let out_ok = match data.targets() {
            Targets::Classes { num_classes, .. } => {
                self.kind == TaskKind::Classification && *num_classes == self.output_dim()
            }
            Targets::Values(t) => self.kind == TaskKind::Regression && t.cols() == self.output_dim(),
        };
        if !out_ok {
            return Err(Error::InvalidData("dataset targets do not match the model head".into()));
        }
        Ok(())
    }

    fn mask<R: Rng>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Tensor {
        let keep = 1.0 / (1.0 - p);
        let data = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        Tensor::from_vec(rows, cols, data).expect("sized above")
    }

    /// Records the forward pass; returns (layer vars, output).
    fn record(
        &self,
        g: &mut Graph,
        data: &Dataset,
        trainable: bool,
        mask_seed: Option<u64>,
    ) -> Result<(Vec<LayerVars>, Var)> {
        self.check_data(data)?;
        let mut h = g.constant(data.inputs().clone())?;
        let mut vars = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let lv = layer.register(g, trainable)?;
            let mask = match mask_seed {
                Some(seed) if layer.dropout() > 0.0 && layer.mode() != AdapterMode::Full => {
                    let mut rng = rng_for(seed, stream::DROPOUT.wrapping_add(i as u64 * 0x100));
                    let (rows, cols) = g.value(h).shape();
                    Some(g.constant(Self::mask(rows, cols, layer.dropout(), &mut rng))?)
                }
                _ => None,
            };
            h = layer.forward_var(g, &lv, h, mask)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h)?;
            }
            vars.push(lv);
        }
        Ok((vars, h))
    }

    fn loss_var(&self, g: &mut Graph, out: Var, data: &Dataset) -> Result<Var> {
        match data.targets() {
            Targets::Classes { labels, .. } => g.softmax_cross_entropy(out, labels),
            Targets::Values(t) => g.mse(out, t),
        }
    }

    fn batch_metric(out: &Tensor, data: &Dataset) -> Result<f64> {
        Ok(match data.targets() {
            Targets::Classes { labels, .. } => accuracy(out, labels),
            Targets::Values(t) => out.sub(t)?.frobenius_norm_sq() / t.len() as f64,
        })
    }

    /// Model outputs (logits or predictions) without dropout.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut h = inputs.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Evaluates `data` without dropout and without touching parameters.
    pub fn evaluate(&self, data: &Dataset) -> Result<MetricRecord> {
        let mut g = Graph::new();
        let (_, out) = self.record(&mut g, data, false, None)?;
        let loss = self.loss_var(&mut g, out, data)?;
        Ok(MetricRecord {
            metric: Self::batch_metric(g.value(out), data)?,
            loss: g.value(loss).item(),
        })
    }

    fn objective(&mut self, data: &Dataset, gamma: f64, mask_seed: Option<u64>) -> Result<Evaluation> {
        let mut g = Graph::new();
        let (vars, out) = self.record(&mut g, data, true, mask_seed)?;
        let task = self.loss_var(&mut g, out, data)?;
        let task_loss = g.value(task).item();
        let (root, reg) = if gamma > 0.0 {
            match gram_penalty_var(&mut g, &self.layers, &vars)? {
                Some(pen) => {
                    let reg = g.value(pen).item();
                    let weighted = g.scale(pen, gamma)?;
                    (g.add(task, weighted)?, reg)
                }
                None => (task, 0.0),
            }
        } else {
            (task, 0.0)
        };
        let loss = g.value(root).item();
        let metric = Self::batch_metric(g.value(out), data)?;
        g.backward(root)?;
        let grad_of = |group: &ParamGroup| -> Vec<f64> {
            let mut flat = Vec::new();
            for r in &group.members {
                let lv = &vars[r.layer];
                let var = match r.kind {
                    ParamKind::Magnitude => Some(lv.magnitude),
                    ParamKind::B => Some(lv.b),
                    ParamKind::A => Some(lv.a),
                    ParamKind::Delta => lv.delta,
                };
                if let Some(v) = var {
                    flat.extend(g.grad_or_zeros(v).into_data());
                }
            }
            flat
        };
        Ok(Evaluation {
            loss,
            task_loss,
            reg,
            metric,
            grad_upper: grad_of(&self.upper),
            grad_lower: grad_of(&self.lower),
        })
    }
}

/// Free-function form of [`AdapterModel::evaluate`].
pub fn evaluate(model: &AdapterModel, data: &Dataset) -> Result<MetricRecord> {
    model.evaluate(data)
}

impl Bilevel for AdapterModel {
    type Batch = ModelBatch;

    fn upper_params(&self) -> Vec<f64> {
        self.upper.gather(&self.layers).expect("group built from these layers")
    }

    fn set_upper_params(&mut self, values: &[f64]) -> Result<()> {
        self.upper.scatter(&mut self.layers, values)
    }

    fn lower_params(&self) -> Vec<f64> {
        self.lower.gather(&self.layers).expect("group built from these layers")
    }

    fn set_lower_params(&mut self, values: &[f64]) -> Result<()> {
        self.lower.scatter(&mut self.layers, values)
    }

    fn train_objective(&mut self, batch: &ModelBatch, gamma: f64) -> Result<Evaluation> {
        self.objective(&batch.data, gamma, Some(batch.mask_seed))
    }

    fn val_objective(&mut self, batch: &ModelBatch) -> Result<Evaluation> {
        self.objective(&batch.data, 0.0, None)
    }
}
