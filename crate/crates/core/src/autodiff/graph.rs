//! The tape: an append-only list of matrix-valued nodes with reverse-mode
//! backward rules.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Column norms below this are rejected as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Hadamard(usize, usize),
    /// `a[i][j] * row[j]`
    MulRow(usize, usize),
    /// `a[i][j] / row[j]`
    DivRow(usize, usize),
    /// `a[i][j] + row[j]`
    AddRow(usize, usize),
    Sum(usize),
    Mean(usize),
    FrobeniusSq(usize),
    Relu(usize),
    ColumnNorms(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Mse {
        pred: usize,
        target: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape over dense matrices.
///
/// Build a forward pass with the op methods, call [`Graph::backward`] once on
/// a scalar node, then read gradients of the leaves with [`Graph::grad`].
/// A graph is single-use: a second backward is an error.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, context: &str) -> Result<Var> {
        value.ensure_finite(context)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "parameter")
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Leaf with an explicit gradient flag.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false, "detach")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a.0, b.0), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a.0), rg, "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a.0, b.0), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a.0, b.0), rg, "sub")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a.0, s), rg, "scale")
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "hadamard", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Hadamard(a.0, b.0), rg, "hadamard")
    }

    fn check_row(&self, a: Var, row: Var, op: &'static str) -> Result<()> {
        let (ra, ca) = self.value(a).shape();
        let (rr, cr) = self.value(row).shape();
        if rr != 1 || cr != ca {
            return Err(Error::ShapeMismatch {
                op,
                lhs: (ra, ca),
                rhs: (rr, cr),
            });
        }
        Ok(())
    }

    /// Scales column `j` of `a` by `row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "mul_row")?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= r[i % cols];
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::MulRow(a.0, row.0), rg, "mul_row")
    }

    /// Divides column `j` of `a` by `row[j]`.
    pub fn div_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "div_row")?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v /= r[i % cols];
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::DivRow(a.0, row.0), rg, "div_row")
    }

    /// Adds `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "add_row")?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += r[i % cols];
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a.0, row.0), rg, "add_row")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a.0), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::InvalidData("mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a.0), rg, "mean")
    }

    pub fn frobenius_norm_sq(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).frobenius_norm_sq());
        let rg = self.rg(a);
        self.push(out, Op::FrobeniusSq(a.0), rg, "frobenius_norm_sq")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a.0), rg, "relu")
    }

    /// Euclidean norm of each column of `w`, as a `1 x k` row.
    pub fn column_norms(&mut self, w: Var) -> Result<Var> {
        let t = self.value(w);
        if t.is_empty() {
            return Err(Error::InvalidData("column_norms of an empty tensor".into()));
        }
        let out = t.column_norms();
        if let Some((column, &norm)) = out.data().iter().enumerate().find(|(_, &n)| n < DEGENERATE_NORM) {
            return Err(Error::DegenerateColumn { column, norm });
        }
        let rg = self.rg(w);
        self.push(out, Op::ColumnNorms(w.0), rg, "column_norms")
    }

    /// Mean softmax cross-entropy of `logits` (n x classes) against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (n, classes) = z.shape();
        if targets.len() != n || n == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: (n, classes),
                rhs: (targets.len(), 1),
            });
        }
        let mut probs = Tensor::zeros(n, classes);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(Error::InvalidClass {
                    index: t,
                    num_classes: classes,
                });
            }
            let row = z.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            for (c, v) in row.iter().enumerate() {
                probs.set(i, c, (v - max).exp() / denom);
            }
            loss -= row[t] - max - log_denom;
        }
        let out = Tensor::scalar(loss / n as f64);
        let rg = self.rg(logits);
        self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            "softmax_cross_entropy",
        )
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        p.check_same_shape(target, "mse")?;
        if p.is_empty() {
            return Err(Error::InvalidData("mse of an empty tensor".into()));
        }
        let sq: f64 = p.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(sq / p.len() as f64);
        let rg = self.rg(pred);
        self.push(
            out,
            Op::Mse {
                pred: pred.0,
                target: target.clone(),
            },
            rg,
            "mse",
        )
    }

    /// Runs backward from a scalar root with upstream gradient 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.backward_with(root, 1.0)
    }

    /// Runs backward from a scalar root with the given upstream gradient.
    pub fn backward_with(&mut self, root: Var, upstream: f64) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(Error::NotScalar(shape));
        }
        self.backward_done = true;
        if !self.rg(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(Tensor::scalar(upstream));

        for i in (0..=root.0).rev() {
            let g = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[i];
            let mut contributions: Vec<(usize, Tensor)> = Vec::with_capacity(2);
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].requires_grad {
                        contributions.push((*a, g.matmul(&vb.transpose())?));
                    }
                    if self.nodes[*b].requires_grad {
                        contributions.push((*b, va.transpose().matmul(&g)?));
                    }
                }
                Op::Transpose(a) => contributions.push((*a, g.transpose())),
                Op::Add(a, b) => {
                    contributions.push((*a, g.clone()));
                    contributions.push((*b, g));
                }
                Op::Sub(a, b) => {
                    contributions.push((*b, g.scale(-1.0)));
                    contributions.push((*a, g));
                }
                Op::Scale(a, s) => contributions.push((*a, g.scale(*s))),
                Op::Hadamard(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    contributions.push((*a, g.zip_map(vb, "hadamard", |x, y| x * y)?));
                    contributions.push((*b, g.zip_map(va, "hadamard", |x, y| x * y)?));
                }
                Op::MulRow(a, r) => {
                    let (va, vr) = (&self.nodes[*a].value, &self.nodes[*r].value);
                    let cols = va.cols();
                    let mut ga = g.clone();
                    let mut gr = vec![0.0; cols];
                    for (idx, gv) in ga.data_mut().iter_mut().enumerate() {
                        let j = idx % cols;
                        gr[j] += *gv * va.data()[idx];
                        *gv *= vr.data()[j];
                    }
                    contributions.push((*a, ga));
                    contributions.push((*r, Tensor::row(&gr)));
                }
                Op::DivRow(a, r) => {
                    let (va, vr) = (&self.nodes[*a].value, &self.nodes[*r].value);
                    let cols = va.cols();
                    let mut ga = g.clone();
                    let mut gr = vec![0.0; cols];
                    for (idx, gv) in ga.data_mut().iter_mut().enumerate() {
                        let j = idx % cols;
                        let d = vr.data()[j];
                        gr[j] -= *gv * va.data()[idx] / (d * d);
                        *gv /= d;
                    }
                    contributions.push((*a, ga));
                    contributions.push((*r, Tensor::row(&gr)));
                }
                Op::AddRow(a, r) => {
                    let cols = g.cols();
                    let mut gr = vec![0.0; cols];
                    for (idx, gv) in g.data().iter().enumerate() {
                        gr[idx % cols] += gv;
                    }
                    contributions.push((*r, Tensor::row(&gr)));
                    contributions.push((*a, g));
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    contributions.push((*a, Tensor::filled(r, c, g.item())));
                }
                Op::Mean(a) => {
                    let va = &self.nodes[*a].value;
                    let (r, c) = va.shape();
                    contributions.push((*a, Tensor::filled(r, c, g.item() / va.len() as f64)));
                }
                Op::FrobeniusSq(a) => {
                    let s = 2.0 * g.item();
                    contributions.push((*a, self.nodes[*a].value.scale(s)));
                }
                Op::Relu(a) => {
                    let va = &self.nodes[*a].value;
                    contributions.push((*a, g.zip_map(va, "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })?));
                }
                Op::ColumnNorms(a) => {
                    let va = &self.nodes[*a].value;
                    let norms = node.value.data();
                    let cols = va.cols();
                    let mut ga = va.clone();
                    for (idx, v) in ga.data_mut().iter_mut().enumerate() {
                        let j = idx % cols;
                        *v *= g.data()[j] / norms[j];
                    }
                    contributions.push((*a, ga));
                }
                Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                    let n = targets.len() as f64;
                    let scale = g.item() / n;
                    let mut gl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let cur = gl.get(i, t);
                        gl.set(i, t, cur - 1.0);
                    }
                    contributions.push((*logits, gl.scale(scale)));
                }
                Op::Mse { pred, target } => {
                    let vp = &self.nodes[*pred].value;
                    let s = 2.0 * g.item() / vp.len() as f64;
                    contributions.push((*pred, vp.zip_map(target, "mse", |p, t| s * (p - t))?));
                }
            }
            for (idx, contrib) in contributions {
                if !self.nodes[idx].requires_grad {
                    continue;
                }
                contrib.ensure_finite("backward")?;
                match &mut self.grads[idx] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Gradient accumulated on `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of its shape when backward never reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.value(v).shape();
                Tensor::zeros(r, c)
            }
        }
    }
}
