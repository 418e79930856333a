use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, num_classes: usize },
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Values(t) => Targets::Values(t.select_rows(indices)),
        }
    }
}

/// Inputs (N x d) with class labels or real-valued targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    targets: Targets,
    seed: u64,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets, seed: u64) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::InvalidData(format!(
                "{} inputs but {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        if let Targets::Classes { labels, num_classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *num_classes) {
                return Err(Error::InvalidClass {
                    index: bad,
                    num_classes: *num_classes,
                });
            }
        }
        inputs.ensure_finite("dataset inputs")?;
        if let Targets::Values(t) = &targets {
            t.ensure_finite("dataset targets")?;
        }
        Ok(Self { inputs, targets, seed })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    /// Seed the dataset was generated from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kind(&self) -> TaskKind {
        match self.targets {
            Targets::Classes { .. } => TaskKind::Classification,
            Targets::Values(_) => TaskKind::Regression,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.targets {
            Targets::Classes { num_classes, .. } => Some(num_classes),
            Targets::Values(_) => None,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Values(_) => None,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            targets: self.targets.select(indices),
            seed: self.seed,
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let targets = match (&self.targets, &other.targets) {
            (
                Targets::Classes {
                    labels: a,
                    num_classes: ca,
                },
                Targets::Classes {
                    labels: b,
                    num_classes: cb,
                },
            ) if ca == cb => Targets::Classes {
                labels: a.iter().chain(b).copied().collect(),
                num_classes: *ca,
            },
            (Targets::Values(a), Targets::Values(b)) => Targets::Values(a.vstack(b)?),
            _ => {
                return Err(Error::InvalidData(
                    "cannot concatenate datasets of different kinds".into(),
                ))
            }
        };
        Dataset::new(self.inputs.vstack(&other.inputs)?, targets, self.seed)
    }

    /// Columnar text: a `key=value` header line, a column-name line, then one
    /// comma-separated row per sample. Floats use shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let (kind, extra) = match &self.targets {
            Targets::Classes { num_classes, .. } => ("classification", format!("classes={num_classes}")),
            Targets::Values(t) => ("regression", format!("outputs={}", t.cols())),
        };
        let _ = writeln!(
            out,
            "kind={kind} d={} n={} {extra} seed={}",
            self.dim(),
            self.len(),
            self.seed
        );
        let mut cols: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        match &self.targets {
            Targets::Classes { .. } => cols.push("label".into()),
            Targets::Values(t) => cols.extend((0..t.cols()).map(|i| format!("y{i}"))),
        }
        let _ = writeln!(out, "{}", cols.join(","));
        for r in 0..self.len() {
            let mut fields: Vec<String> = self.inputs.row_slice(r).iter().map(|v| v.to_string()).collect();
            match &self.targets {
                Targets::Classes { labels, .. } => fields.push(labels[r].to_string()),
                Targets::Values(t) => fields.extend(t.row_slice(r).iter().map(|v| v.to_string())),
            }
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Dataset> {
        let bad = |msg: &str| Error::InvalidData(format!("dataset text: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        let mut kind = None;
        let (mut d, mut n, mut extra, mut seed) = (None, None, None, 0u64);
        for field in header.split_whitespace() {
            let (key, value) = field.split_once('=').ok_or_else(|| bad("malformed header"))?;
            let parse = |v: &str| v.parse::<u64>().map_err(|_| bad("malformed header number"));
            match key {
                "kind" => kind = Some(value.to_string()),
                "d" => d = Some(parse(value)? as usize),
                "n" => n = Some(parse(value)? as usize),
                "classes" | "outputs" => extra = Some(parse(value)? as usize),
                "seed" => seed = parse(value)?,
                _ => return Err(bad(&format!("unknown header key {key}"))),
            }
        }
        let (d, n, extra) = (
            d.ok_or_else(|| bad("missing d"))?,
            n.ok_or_else(|| bad("missing n"))?,
            extra.ok_or_else(|| bad("missing classes/outputs"))?,
        );
        let classification = match kind.as_deref() {
            Some("classification") => true,
            Some("regression") => false,
            _ => return Err(bad("unknown kind")),
        };
        lines.next().ok_or_else(|| bad("missing column line"))?;
        let width = if classification { d + 1 } else { d + extra };
        let mut inputs = Vec::with_capacity(n * d);
        let mut labels = Vec::new();
        let mut values = Vec::new();
        let mut rows = 0;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width {
                return Err(bad("row width mismatch"));
            }
            for f in &fields[..d] {
                inputs.push(f.parse::<f64>().map_err(|_| bad("bad float"))?);
            }
            if classification {
                labels.push(fields[d].parse::<usize>().map_err(|_| bad("bad label"))?);
            } else {
                for f in &fields[d..] {
                    values.push(f.parse::<f64>().map_err(|_| bad("bad float"))?);
                }
            }
            rows += 1;
        }
        if rows != n {
            return Err(bad(&format!("header says {n} rows, found {rows}")));
        }
        let targets = if classification {
            Targets::Classes {
                labels,
                num_classes: extra,
            }
        } else {
            Targets::Values(Tensor::from_vec(n, extra, values)?)
        };
        Dataset::new(Tensor::from_vec(n, d, inputs)?, targets, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Dataset::from_text(&fs::read_to_string(path)?)
    }
}

/// Disjoint train/validation parts of one source dataset.
#[derive(Debug, Clone)]
pub struct SplitPair {
    pub train: Dataset,
    pub val: Dataset,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

impl SplitPair {
    /// `train` followed by `val`.
    pub fn union(&self) -> Result<Dataset> {
        self.train.concat(&self.val)
    }
}

/// Seeded permutation, then the first `round(ratio * N)` rows go to train and
/// the rest to validation.
pub fn split(dataset: &Dataset, ratio: f64, seed: u64) -> Result<SplitPair> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let n = dataset.len();
    let n_train = (ratio * n as f64).round() as usize;
    if n < 2 || n_train == 0 || n_train == n {
        return Err(Error::InvalidData(format!(
            "cannot split {n} samples at ratio {ratio} into two nonempty parts"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(seed, crate::rng::stream::SPLIT));
    let (tr, va) = perm.split_at(n_train);
    Ok(SplitPair {
        train: dataset.subset(tr),
        val: dataset.subset(va),
        train_indices: tr.to_vec(),
        val_indices: va.to_vec(),
        ratio,
        seed,
    })
}

/// Epoch-wise shuffled mini-batches in a seed-determined order.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64, stream: u64) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::InvalidConfig(
                "batch sampler needs n > 0 and batch_size > 0".into(),
            ));
        }
        let mut rng = rng_for(seed, stream);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            pos: 0,
            batch_size: batch_size.min(n),
            rng,
        })
    }

    /// Indices of the next batch; reshuffles at every epoch boundary.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        out
    }

    pub fn next_batch(&mut self, data: &Dataset) -> Dataset {
        data.subset(&self.next_indices())
    }
}
