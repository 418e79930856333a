//! Analytic two-level problems with closed-form inner solutions, used to
//! verify the unrolled hypergradient estimator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bilevel::problem::{Bilevel, Evaluation};
use crate::error::{Error, Result};

/// Inner loss as a function of the residual `u = V - C M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerLoss {
    /// `sum u_i^2 / 2`: constant mixed second derivative.
    Quadratic,
    /// `sum (u_i^2 / 2 + u_i^4 / 4)`: curvature depends on `u`.
    Quartic,
}

/// `L_tr(V, M) = sum phi(V - C M)` and
/// `L_val(V, M) = ||V - t||^2 / 2 + mu ||M - s||^2 / 2`.
///
/// Both inner losses are minimized at `V*(M) = C M`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticBilevel {
    pub inner: InnerLoss,
    /// `n x m`.
    pub c: DMatrix<f64>,
    pub t: DVector<f64>,
    pub mu: f64,
    pub s: DVector<f64>,
    pub m: DVector<f64>,
    pub v: DVector<f64>,
}

fn gaussian_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

impl AnalyticBilevel {
    /// Scalar instance with `c`, target `t`, at `m` and `v`.
    pub fn scalar(c: f64, t: f64, m: f64, v: f64) -> Self {
        Self {
            inner: InnerLoss::Quadratic,
            c: DMatrix::from_element(1, 1, c),
            t: DVector::from_element(1, t),
            mu: 0.0,
            s: DVector::zeros(1),
            m: DVector::from_element(1, m),
            v: DVector::from_element(1, v),
        }
    }

    /// Random `C` (`n x m`), `t`, and `M`, with `V` at the inner optimum `C M`.
    pub fn random<R: Rng + ?Sized>(inner: InnerLoss, n: usize, m: usize, rng: &mut R) -> Self {
        let c = DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(rng));
        let mvec = gaussian_vec(m, rng);
        Self {
            inner,
            v: &c * &mvec,
            c,
            t: gaussian_vec(n, rng),
            mu: 0.0,
            s: DVector::zeros(m),
            m: mvec,
        }
    }

    /// Moves `V` to the inner optimum `C M`.
    pub fn solve_inner(&mut self) {
        self.v = &self.c * &self.m;
    }

    fn residual(&self) -> DVector<f64> {
        &self.v - &self.c * &self.m
    }

    /// `phi'(u)` elementwise.
    fn phi_prime(&self, u: &DVector<f64>) -> DVector<f64> {
        match self.inner {
            InnerLoss::Quadratic => u.clone(),
            InnerLoss::Quartic => u.map(|x| x + x * x * x),
        }
    }

    /// `phi''(u)` elementwise.
    fn phi_second(&self, u: &DVector<f64>) -> DVector<f64> {
        match self.inner {
            InnerLoss::Quadratic => u.map(|_| 1.0),
            InnerLoss::Quartic => u.map(|x| 1.0 + 3.0 * x * x),
        }
    }

    /// `d/dV [grad_M L_tr(V, M)] g = -C^T diag(phi''(u)) g`, the quantity the
    /// central-difference curvature term approximates.
    pub fn mixed_hvp(&self, v: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        let u = v - &self.c * &self.m;
        let weighted = self.phi_second(&u).component_mul(g);
        -(self.c.transpose() * weighted)
    }

    pub fn lower_vec(&self) -> DVector<f64> {
        self.v.clone()
    }

    pub fn upper_vec(&self) -> DVector<f64> {
        self.m.clone()
    }

    /// Minimizer of `||C M - t||^2 / 2 + mu ||M - s||^2 / 2`.
    pub fn bilevel_optimum(&self) -> Result<DVector<f64>> {
        let k = self.c.ncols();
        let lhs = self.c.transpose() * &self.c + DMatrix::identity(k, k) * self.mu;
        let rhs = self.c.transpose() * &self.t + &self.s * self.mu;
        lhs.cholesky()
            .map(|ch| ch.solve(&rhs))
            .ok_or_else(|| Error::Degenerate("C^T C + mu I is not positive definite".into()))
    }

    /// Upper objective along the inner solution path, `L_val(C M, M)`.
    pub fn outer_value(&self, m: &DVector<f64>) -> f64 {
        let r = &self.c * m - &self.t;
        0.5 * r.norm_squared() + 0.5 * self.mu * (m - &self.s).norm_squared()
    }
}

/// `d/dM L_val(V*(M), M)` via `V*(M) = C M`: `C^T (C M - t) + mu (M - s)`.
pub fn exact_hypergradient_oracle(problem: &AnalyticBilevel) -> Result<DVector<f64>> {
    if problem.inner != InnerLoss::Quadratic {
        return Err(Error::Unsupported(
            "the closed-form oracle covers quadratic inner losses only".into(),
        ));
    }
    let r = &problem.c * &problem.m - &problem.t;
    Ok(problem.c.transpose() * r + (&problem.m - &problem.s) * problem.mu)
}

impl Bilevel for AnalyticBilevel {
    type Batch = ();

    fn upper_params(&self) -> Vec<f64> {
        self.m.as_slice().to_vec()
    }

    fn set_upper_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "upper params",
                lhs: (self.m.len(), 1),
                rhs: (values.len(), 1),
            });
        }
        self.m.as_mut_slice().copy_from_slice(values);
        Ok(())
    }

    fn lower_params(&self) -> Vec<f64> {
        self.v.as_slice().to_vec()
    }

    fn set_lower_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.v.len() {
            return Err(Error::ShapeMismatch {
                op: "lower params",
                lhs: (self.v.len(), 1),
                rhs: (values.len(), 1),
            });
        }
        self.v.as_mut_slice().copy_from_slice(values);
        Ok(())
    }

    fn train_objective(&mut self, _: &(), _gamma: f64) -> Result<Evaluation> {
        let u = self.residual();
        let loss = match self.inner {
            InnerLoss::Quadratic => 0.5 * u.norm_squared(),
            InnerLoss::Quartic => u.iter().map(|x| 0.5 * x * x + 0.25 * x.powi(4)).sum(),
        };
        let dphi = self.phi_prime(&u);
        let grad_upper = -(self.c.transpose() * &dphi);
        Ok(Evaluation {
            loss,
            task_loss: loss,
            reg: 0.0,
            metric: loss,
            grad_upper: grad_upper.as_slice().to_vec(),
            grad_lower: dphi.as_slice().to_vec(),
        })
    }

    fn val_objective(&mut self, _: &()) -> Result<Evaluation> {
        let r = &self.v - &self.t;
        let dm = &self.m - &self.s;
        let loss = 0.5 * r.norm_squared() + 0.5 * self.mu * dm.norm_squared();
        Ok(Evaluation {
            loss,
            task_loss: loss,
            reg: 0.0,
            metric: loss,
            grad_upper: (dm * self.mu).as_slice().to_vec(),
            grad_lower: r.as_slice().to_vec(),
        })
    }
}
