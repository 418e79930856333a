use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::bilevel::optim::{AdamParams, OptimizerKind, OptimizerState};
use crate::error::{Error, Result};
use crate::harness::dataset::{BatchSampler, Dataset, Targets, TaskKind};
use crate::rng::{rng_for, stream};

/// Distance between any two pretraining class means, in units of the
/// within-class standard deviation.
pub const CLUSTER_SEPARATION: f64 = 6.0;

/// Gaussian-cluster classification with a shifted, label-noised target
/// distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterTaskSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub n_pretrain: usize,
    pub n_target: usize,
    pub n_test: usize,
    /// Length of the per-class translation applied to the target means.
    pub shift: f64,
    /// Fraction of target labels (training and test) replaced by uniform
    /// random labels.
    pub noise: f64,
}

impl Default for ClusterTaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            dim: 16,
            n_pretrain: 2000,
            n_target: 160,
            n_test: 2000,
            shift: 5.0,
            noise: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterTask {
    pub pretrain: Dataset,
    pub target: Dataset,
    pub test: Dataset,
    /// Pretraining class means, one row per class.
    pub means: Tensor,
    /// Target class means.
    pub target_means: Tensor,
}

fn unit_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `count` unit vectors; orthonormal when `count <= dim`.
fn spread_directions<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = unit_gaussian(dim, rng);
        if out.len() < dim {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
        }
        out.push(v);
    }
    out
}

fn sample_clusters<R: Rng + ?Sized>(means: &Tensor, n: usize, rng: &mut R) -> (Tensor, Vec<usize>) {
    let (classes, dim) = means.shape();
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // Balanced labels: every class appears once before any repeats.
        let c = if n >= classes {
            i % classes
        } else {
            rng.random_range(0..classes)
        };
        labels.push(c);
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(rng);
            inputs.push(means.get(c, j) + z);
        }
    }
    (Tensor::from_vec(n, dim, inputs).expect("sized above"), labels)
}

/// Replaces each label, with probability `noise`, by a uniform draw.
fn corrupt_labels<R: Rng + ?Sized>(labels: &mut [usize], num_classes: usize, noise: f64, rng: &mut R) {
    for y in labels.iter_mut() {
        if rng.random::<f64>() < noise {
            *y = rng.random_range(0..num_classes);
        }
    }
}

pub fn make_cluster_task(spec: &ClusterTaskSpec, seed: u64) -> Result<ClusterTask> {
    let ClusterTaskSpec {
        num_classes,
        dim,
        n_pretrain,
        n_target,
        n_test,
        shift,
        noise,
    } = *spec;
    if num_classes < 2 || dim < 2 || n_pretrain == 0 || n_target == 0 || n_test == 0 {
        return Err(Error::InvalidConfig(
            "cluster task needs num_classes >= 2, dim >= 2 and positive sample counts".into(),
        ));
    }
    if !(shift.is_finite() && shift >= 0.0) || !(0.0..=1.0).contains(&noise) {
        return Err(Error::InvalidConfig("shift must be >= 0 and noise in [0, 1]".into()));
    }
    let mut rng = rng_for(seed, stream::TASK);
    let radius = CLUSTER_SEPARATION / 2f64.sqrt();
    let dirs = spread_directions(num_classes, dim, &mut rng);
    let means = Tensor::from_vec(
        num_classes,
        dim,
        dirs.iter().flat_map(|d| d.iter().map(|x| x * radius)).collect(),
    )?;
    let mut target_means = means.clone();
    for c in 0..num_classes {
        let t = unit_gaussian(dim, &mut rng);
        for (j, tj) in t.iter().enumerate() {
            target_means.set(c, j, means.get(c, j) + shift * tj);
        }
    }
    let (x_pre, y_pre) = sample_clusters(&means, n_pretrain, &mut rng);
    let (x_tgt, mut y_tgt) = sample_clusters(&target_means, n_target, &mut rng);
    corrupt_labels(&mut y_tgt, num_classes, noise, &mut rng);
    let mut test_rng = rng_for(seed, stream::TEST_SET);
    let (x_test, mut y_test) = sample_clusters(&target_means, n_test, &mut test_rng);
    corrupt_labels(&mut y_test, num_classes, noise, &mut test_rng);
    let classes = |labels| Targets::Classes { labels, num_classes };
    Ok(ClusterTask {
        pretrain: Dataset::new(x_pre, classes(y_pre), seed)?,
        target: Dataset::new(x_tgt, classes(y_tgt), seed)?,
        test: Dataset::new(x_test, classes(y_test), seed)?,
        means,
        target_means,
    })
}

/// A frozen random network `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Teacher {
    pub fn random<R: Rng + ?Sized>(dim: usize, width: usize, rng: &mut R) -> Self {
        Self {
            w1: Tensor::randn(dim, width, (2.0 / dim as f64).sqrt(), rng),
            b1: Tensor::randn(1, width, 0.1, rng),
            w2: Tensor::randn(width, 1, (1.0 / width as f64).sqrt(), rng),
            b2: Tensor::randn(1, 1, 0.1, rng),
        }
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let h = add_bias(&x.matmul(&self.w1)?, &self.b1).map(|v| v.max(0.0));
        Ok(add_bias(&h.matmul(&self.w2)?, &self.b2))
    }

    /// A copy with every weight moved by `scale` times standard normal noise.
    pub fn perturbed<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> Teacher {
        let mut jitter = |t: &Tensor| {
            let noise = Tensor::randn(t.rows(), t.cols(), scale, rng);
            t.add(&noise).expect("same shape")
        };
        Teacher {
            w1: jitter(&self.w1),
            b1: jitter(&self.b1),
            w2: jitter(&self.w2),
            b2: jitter(&self.b2),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }
}

fn add_bias(y: &Tensor, bias: &Tensor) -> Tensor {
    let k = y.cols();
    let mut out = y.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += bias.data()[i % k];
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherTaskSpec {
    pub dim: usize,
    pub width: usize,
    pub n_pretrain: usize,
    pub n_target: usize,
    pub n_test: usize,
    /// Standard deviation of the additive target noise.
    pub noise: f64,
    /// Weight perturbation separating the pretraining teacher from the target teacher.
    pub shift: f64,
}

impl Default for TeacherTaskSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            width: 32,
            n_pretrain: 2000,
            n_target: 160,
            n_test: 2000,
            noise: 0.1,
            shift: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TeacherTask {
    pub teacher: Teacher,
    pub pretrain: Dataset,
    pub target: Dataset,
    pub test: Dataset,
}

fn teacher_samples<R: Rng + ?Sized>(
    teacher: &Teacher,
    n: usize,
    noise: f64,
    seed: u64,
    rng: &mut R,
) -> Result<Dataset> {
    let x = Tensor::randn(n, teacher.dim(), 1.0, rng);
    let mut y = teacher.predict(&x)?;
    if noise > 0.0 {
        y = y.add(&Tensor::randn(n, 1, noise, rng))?;
    }
    Dataset::new(x, Targets::Values(y), seed)
}

/// Targets are the teacher's outputs plus Gaussian noise of standard
/// deviation `noise`, on standard normal inputs.
pub fn make_teacher_regression(
    dim: usize,
    width: usize,
    n_target: usize,
    noise: f64,
    seed: u64,
) -> Result<(Teacher, Dataset, Dataset)> {
    let spec = TeacherTaskSpec {
        dim,
        width,
        n_target,
        noise,
        ..TeacherTaskSpec::default()
    };
    let task = make_teacher_task(&spec, seed)?;
    Ok((task.teacher, task.target, task.test))
}

/// Target and test data from a random teacher, plus pretraining data from a
/// perturbed copy of it.
pub fn make_teacher_task(spec: &TeacherTaskSpec, seed: u64) -> Result<TeacherTask> {
    if spec.dim == 0 || spec.width == 0 || spec.n_target == 0 || spec.n_test == 0 || spec.n_pretrain == 0 {
        return Err(Error::InvalidConfig("teacher task needs positive sizes".into()));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0 && spec.shift.is_finite() && spec.shift >= 0.0) {
        return Err(Error::InvalidConfig("teacher noise and shift must be >= 0".into()));
    }
    let mut rng = rng_for(seed, stream::TASK);
    let teacher = Teacher::random(spec.dim, spec.width, &mut rng);
    let source = teacher.perturbed(spec.shift, &mut rng);
    let target = teacher_samples(&teacher, spec.n_target, spec.noise, seed, &mut rng)?;
    let pretrain = teacher_samples(&source, spec.n_pretrain, spec.noise, seed, &mut rng)?;
    let test = teacher_samples(
        &teacher,
        spec.n_test,
        spec.noise,
        seed,
        &mut rng_for(seed, stream::TEST_SET),
    )?;
    Ok(TeacherTask {
        teacher,
        pretrain,
        target,
        test,
    })
}

/// Layer widths of a fully connected network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl ModelShape {
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Dense weights of a pretrained network, relu between layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseNetwork {
    pub layers: Vec<DenseLayer>,
    pub kind: TaskKind,
}

impl BaseNetwork {
    pub fn random(shape: &ModelShape, kind: TaskKind, seed: u64) -> Result<Self> {
        let dims = shape.layer_dims();
        if dims.iter().any(|&(d, k)| d == 0 || k == 0) {
            return Err(Error::InvalidConfig("model widths must be positive".into()));
        }
        let mut rng = rng_for(seed, stream::PRETRAIN);
        let layers = dims
            .into_iter()
            .map(|(d, k)| DenseLayer {
                weight: Tensor::randn(d, k, (2.0 / d as f64).sqrt(), &mut rng),
                bias: Tensor::zeros(1, k),
            })
            .collect();
        Ok(Self { layers, kind })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = add_bias(&h.matmul(&layer.weight)?, &layer.bias);
            if i + 1 < self.layers.len() {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Accuracy for classification, mean squared error for regression.
    pub fn metric(&self, data: &Dataset) -> Result<f64> {
        let out = self.forward(data.inputs())?;
        Ok(match data.targets() {
            Targets::Classes { labels, .. } => accuracy(&out, labels),
            Targets::Values(t) => out.sub(t)?.frobenius_norm_sq() / t.len() as f64,
        })
    }
}

/// Fraction of rows whose argmax (first index on ties) matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = (0..logits.rows())
        .filter(|&r| {
            let row = logits.row_slice(r);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            best == labels[r]
        })
        .count();
    hits as f64 / logits.rows().max(1) as f64
}

fn task_loss(g: &mut Graph, out: Var, data: &Dataset) -> Result<Var> {
    match data.targets() {
        Targets::Classes { labels, .. } => g.softmax_cross_entropy(out, labels),
        Targets::Values(t) => g.mse(out, t),
    }
}

pub const PRETRAIN_LR: f64 = 1e-2;
pub const PRETRAIN_BATCH: usize = 64;

/// Dense training of every weight on `data` with Adam; `steps = 0` returns
/// the seeded random initialization.
pub fn pretrain_base(shape: &ModelShape, data: &Dataset, steps: usize, seed: u64) -> Result<BaseNetwork> {
    if data.dim() != shape.input_dim {
        return Err(Error::ShapeMismatch {
            op: "pretrain input",
            lhs: (data.len(), data.dim()),
            rhs: (shape.input_dim, 0),
        });
    }
    match (data.kind(), data.num_classes()) {
        (TaskKind::Classification, Some(c)) if c != shape.output_dim => {
            return Err(Error::InvalidConfig(format!(
                "{c} classes but output width {}",
                shape.output_dim
            )))
        }
        _ => {}
    }
    let mut net = BaseNetwork::random(shape, data.kind(), seed)?;
    if steps == 0 {
        return Ok(net);
    }
    let mut flat: Vec<f64> = net
        .layers
        .iter()
        .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
        .collect();
    let mut opt = OptimizerState::new(OptimizerKind::Adamw, flat.len(), 0.0, AdamParams::default());
    let mut sampler = BatchSampler::new(data.len(), PRETRAIN_BATCH, seed, stream::PRETRAIN)?;
    for step in 0..steps {
        let batch = sampler.next_batch(data);
        let mut g = Graph::new();
        let mut vars = Vec::new();
        let mut h = g.constant(batch.inputs().clone())?;
        for (i, layer) in net.layers.iter().enumerate() {
            let w = g.param(layer.weight.clone())?;
            let b = g.param(layer.bias.clone())?;
            vars.push((w, b));
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if i + 1 < net.layers.len() {
                h = g.relu(h)?;
            }
        }
        let loss = task_loss(&mut g, h, &batch).map_err(|e| e.at(format!("pretrain step {step}")))?;
        g.backward(loss)?;
        let grad: Vec<f64> = vars
            .iter()
            .flat_map(|&(w, b)| {
                let gw = g.grad_or_zeros(w);
                let gb = g.grad_or_zeros(b);
                gw.into_data().into_iter().chain(gb.into_data())
            })
            .collect();
        opt.step(&mut flat, &grad, PRETRAIN_LR)
            .map_err(|e| e.at(format!("pretrain step {step}")))?;
        let mut offset = 0;
        for layer in net.layers.iter_mut() {
            for t in [&mut layer.weight, &mut layer.bias] {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
    }
    Ok(net)
}
