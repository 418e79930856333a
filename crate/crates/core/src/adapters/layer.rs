use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var, DEGENERATE_NORM};
use crate::error::{Error, Result};

/// How a layer adapts its frozen base weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    /// `W' = W0 + (alpha/r) B A`
    Lora,
    /// `W' = m * (W0 + (alpha/r) B A) / ||W0 + (alpha/r) B A||_c`
    Dora,
    /// `W' = W0 + Delta` with a dense trainable `Delta`; full fine-tuning
    /// expressed without ever writing to `W0`.
    Full,
}

/// Trainable tensors a layer can own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Magnitude,
    B,
    A,
    Delta,
}

/// One linear map `x -> x W' + bias` with frozen `W0` (d x k) and `bias`
/// (1 x k) and mode-dependent trainable factors.
///
/// Inputs are row vectors with `d` entries; column `j` of `W'` produces output
/// unit `j`, so magnitudes and column norms are per output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayer {
    base: Tensor,
    bias: Tensor,
    b: Tensor,
    a: Tensor,
    magnitude: Tensor,
    delta: Option<Tensor>,
    rank: usize,
    alpha: f64,
    mode: AdapterMode,
    dropout: f64,
    detach_norm: bool,
}

/// Graph handles for a layer's tensors in one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub base: Var,
    pub bias: Var,
    pub b: Var,
    pub a: Var,
    pub magnitude: Var,
    pub delta: Option<Var>,
}

impl AdapterLayer {
    /// Wraps frozen `base`/`bias` with fresh adapter factors: `B = 0`,
    /// `A ~ U(-1/sqrt(r), 1/sqrt(r))`, `m = ||W0||_c`, `Delta = 0`.
    pub fn new<R: Rng + ?Sized>(
        base: Tensor,
        bias: Tensor,
        mode: AdapterMode,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, k) = base.shape();
        if d == 0 || k == 0 {
            return Err(Error::InvalidConfig("empty base weight".into()));
        }
        if bias.shape() != (1, k) {
            return Err(Error::ShapeMismatch {
                op: "adapter bias",
                lhs: (1, k),
                rhs: bias.shape(),
            });
        }
        if rank == 0 || rank > d.min(k) {
            return Err(Error::InvalidConfig(format!(
                "rank {rank} must lie in [1, {}]",
                d.min(k)
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {alpha}")));
        }
        base.ensure_finite("base weight")?;
        bias.ensure_finite("base bias")?;
        let bound = 1.0 / (rank as f64).sqrt();
        let a = Tensor::uniform(rank, k, -bound, bound, rng);
        let magnitude = base.column_norms();
        if mode == AdapterMode::Dora {
            check_columns(&magnitude)?;
        }
        let delta = (mode == AdapterMode::Full).then(|| Tensor::zeros(d, k));
        Ok(Self {
            base,
            bias,
            b: Tensor::zeros(d, rank),
            a,
            magnitude,
            delta,
            rank,
            alpha,
            mode,
            dropout: 0.0,
            detach_norm: false,
        })
    }

    pub fn with_dropout(mut self, p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("dropout must lie in [0, 1), got {p}")));
        }
        self.dropout = p;
        Ok(self)
    }

    pub fn with_detach_norm(mut self, detach: bool) -> Self {
        self.detach_norm = detach;
        self
    }

    pub fn base(&self) -> &Tensor {
        &self.base
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn magnitude(&self) -> &Tensor {
        &self.magnitude
    }

    pub fn delta(&self) -> Option<&Tensor> {
        self.delta.as_ref()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `alpha / r`
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn detach_norm(&self) -> bool {
        self.detach_norm
    }

    pub fn in_dim(&self) -> usize {
        self.base.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.base.cols()
    }

    /// Trainable tensors of this layer, in flattening order.
    pub fn trainable_kinds(&self) -> &'static [ParamKind] {
        match self.mode {
            AdapterMode::Lora => &[ParamKind::B, ParamKind::A],
            AdapterMode::Dora => &[ParamKind::Magnitude, ParamKind::B, ParamKind::A],
            AdapterMode::Full => &[ParamKind::Delta],
        }
    }

    pub fn param(&self, kind: ParamKind) -> Option<&Tensor> {
        match kind {
            ParamKind::Magnitude => (self.mode == AdapterMode::Dora).then_some(&self.magnitude),
            ParamKind::B => (self.mode != AdapterMode::Full).then_some(&self.b),
            ParamKind::A => (self.mode != AdapterMode::Full).then_some(&self.a),
            ParamKind::Delta => self.delta.as_ref(),
        }
    }

    /// Replaces a trainable tensor. Shapes must match; `W0` has no setter.
    pub fn set_param(&mut self, kind: ParamKind, value: Tensor) -> Result<()> {
        let slot = match kind {
            ParamKind::Magnitude if self.mode == AdapterMode::Dora => &mut self.magnitude,
            ParamKind::B if self.mode != AdapterMode::Full => &mut self.b,
            ParamKind::A if self.mode != AdapterMode::Full => &mut self.a,
            ParamKind::Delta => match &mut self.delta {
                Some(d) => d,
                None => {
                    return Err(Error::InvalidConfig(format!(
                        "{:?} layer has no dense delta",
                        self.mode
                    )))
                }
            },
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "{kind:?} is not trainable in {:?} mode",
                    self.mode
                )))
            }
        };
        slot.check_same_shape(&value, "set_param")?;
        value.ensure_finite("set_param")?;
        *slot = value;
        Ok(())
    }

    /// Checks every structural invariant; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let (d, k) = self.base.shape();
        let r = self.rank;
        if d == 0 || k == 0 || r == 0 || r > d.min(k) {
            return Err(Error::InvalidData(format!("bad layer dims d={d} k={k} r={r}")));
        }
        let expect = [
            ("bias", &self.bias, (1, k)),
            ("b", &self.b, (d, r)),
            ("a", &self.a, (r, k)),
            ("magnitude", &self.magnitude, (1, k)),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::InvalidData(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            t.ensure_finite(name)?;
        }
        match (&self.delta, self.mode) {
            (Some(delta), AdapterMode::Full) if delta.shape() == (d, k) => delta.ensure_finite("delta")?,
            (None, AdapterMode::Lora | AdapterMode::Dora) => {}
            _ => return Err(Error::InvalidData("dense delta must exist exactly in full mode".into())),
        }
        self.base.ensure_finite("base")?;
        if !(self.alpha.is_finite() && self.alpha > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidData("bad alpha or dropout".into()));
        }
        Ok(())
    }

    /// Re-draws `B = 0` and a fresh `A`, as at construction.
    pub fn reset_direction<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let bound = 1.0 / (self.rank as f64).sqrt();
        self.b = Tensor::zeros(self.in_dim(), self.rank);
        self.a = Tensor::uniform(self.rank, self.out_dim(), -bound, bound, rng);
        if let Some(d) = &mut self.delta {
            *d = Tensor::zeros(d.rows(), d.cols());
        }
    }

    /// Puts this layer's tensors on `g`. Trainable tensors become leaves with
    /// `requires_grad = trainable`; `W0` and the bias are always constants.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Result<LayerVars> {
        let rg = |kind: ParamKind| trainable && self.trainable_kinds().contains(&kind);
        Ok(LayerVars {
            base: g.constant(self.base.clone())?,
            bias: g.constant(self.bias.clone())?,
            b: g.leaf(self.b.clone(), rg(ParamKind::B))?,
            a: g.leaf(self.a.clone(), rg(ParamKind::A))?,
            magnitude: g.leaf(self.magnitude.clone(), rg(ParamKind::Magnitude))?,
            delta: match &self.delta {
                Some(d) => Some(g.leaf(d.clone(), rg(ParamKind::Delta))?),
                None => None,
            },
        })
    }

    /// `V + dV`: `W0 + (alpha/r) B A`, or `W0 + Delta` in full mode.
    pub fn direction_var(&self, g: &mut Graph, vars: &LayerVars) -> Result<Var> {
        match (self.mode, vars.delta) {
            (AdapterMode::Full, Some(delta)) => g.add(vars.base, delta),
            _ => {
                let ba = g.matmul(vars.b, vars.a)?;
                let update = g.scale(ba, self.scaling())?;
                g.add(vars.base, update)
            }
        }
    }

    fn norms_var(&self, g: &mut Graph, direction: Var) -> Result<Var> {
        let norms = g.column_norms(direction)?;
        if self.detach_norm {
            g.detach(norms)
        } else {
            Ok(norms)
        }
    }

    /// The merged weight `W'` as a graph node.
    pub fn weight_var(&self, g: &mut Graph, vars: &LayerVars) -> Result<Var> {
        let direction = self.direction_var(g, vars)?;
        match self.mode {
            AdapterMode::Lora | AdapterMode::Full => Ok(direction),
            AdapterMode::Dora => {
                let norms = self.norms_var(g, direction)?;
                let unit = g.div_row(direction, norms)?;
                g.mul_row(unit, vars.magnitude)
            }
        }
    }

    /// Records `x W' + bias`. With a dropout `mask` (same shape as `x`), the
    /// mask multiplies the adapter-path input only:
    /// lora: `x W0 + s ((x . mask) B) A`;
    /// dora: `(x W0 + s ((x . mask) B) A) * m / ||W0 + s B A||_c`.
    pub fn forward_var(&self, g: &mut Graph, vars: &LayerVars, x: Var, mask: Option<Var>) -> Result<Var> {
        let (_, cols) = g.value(x).shape();
        if cols != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "adapter forward",
                lhs: g.value(x).shape(),
                rhs: self.base.shape(),
            });
        }
        let out = match (mask, self.mode) {
            (Some(mask), AdapterMode::Lora | AdapterMode::Dora) => {
                let frozen = g.matmul(x, vars.base)?;
                let dropped = g.hadamard(x, mask)?;
                let xb = g.matmul(dropped, vars.b)?;
                let xba = g.matmul(xb, vars.a)?;
                let adapter = g.scale(xba, self.scaling())?;
                let combined = g.add(frozen, adapter)?;
                if self.mode == AdapterMode::Dora {
                    let direction = self.direction_var(g, vars)?;
                    let norms = self.norms_var(g, direction)?;
                    let unit = g.div_row(combined, norms)?;
                    g.mul_row(unit, vars.magnitude)?
                } else {
                    combined
                }
            }
            _ => {
                let w = self.weight_var(g, vars)?;
                g.matmul(x, w)?
            }
        };
        g.add_row(out, vars.bias)
    }

    fn forward_value(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let y = self.forward_var(&mut g, &vars, xv, None)?;
        Ok(g.value(y).clone())
    }

    /// Forward pass in any mode, without dropout or gradient tracking.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_value(x)
    }

    /// Forward through the frozen base only: `x W0 + bias`.
    pub fn base_forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.base)?;
        let k = y.cols();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += self.bias.data()[i % k];
        }
        Ok(y)
    }

    /// `V + dV` as a plain tensor.
    pub fn direction_matrix(&self) -> Result<Tensor> {
        match &self.delta {
            Some(delta) => self.base.add(delta),
            None => self.base.add(&self.b.matmul(&self.a)?.scale(self.scaling())),
        }
    }

    /// The dense weight this layer applies, with no gradient tracking.
    pub fn merge_weights(&self) -> Result<Tensor> {
        let direction = self.direction_matrix()?;
        if self.mode != AdapterMode::Dora {
            return Ok(direction);
        }
        let norms = direction.column_norms();
        check_columns(&norms)?;
        let k = direction.cols();
        let mut merged = direction;
        for (i, v) in merged.data_mut().iter_mut().enumerate() {
            let j = i % k;
            *v *= self.magnitude.data()[j] / norms.data()[j];
        }
        Ok(merged)
    }
}

fn check_columns(norms: &Tensor) -> Result<()> {
    match norms.data().iter().enumerate().find(|(_, &n)| n < DEGENERATE_NORM) {
        Some((column, &norm)) => Err(Error::DegenerateColumn { column, norm }),
        None => Ok(()),
    }
}

/// Forward through a layer that must be in LoRA mode.
pub fn lora_forward(layer: &AdapterLayer, x: &Tensor) -> Result<Tensor> {
    if layer.mode() != AdapterMode::Lora {
        return Err(Error::InvalidConfig(format!(
            "lora_forward on a {:?} layer",
            layer.mode()
        )));
    }
    layer.forward(x)
}

/// Forward through a layer that must be in DoRA mode.
pub fn dora_forward(layer: &AdapterLayer, x: &Tensor) -> Result<Tensor> {
    if layer.mode() != AdapterMode::Dora {
        return Err(Error::InvalidConfig(format!(
            "dora_forward on a {:?} layer",
            layer.mode()
        )));
    }
    layer.forward(x)
}

/// Dense weight of `layer`.
pub fn merge_weights(layer: &AdapterLayer) -> Result<Tensor> {
    layer.merge_weights()
}

/// Unnormalized direction matrix `W0 + (alpha/r) B A` of `layer`.
pub fn direction_matrix(layer: &AdapterLayer) -> Result<Tensor> {
    layer.direction_matrix()
}
