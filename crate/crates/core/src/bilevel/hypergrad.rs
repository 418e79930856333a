use crate::bilevel::problem::Bilevel;
use crate::error::{Error, Result};

/// Probe norms below this skip the curvature term.
pub const MIN_PROBE_NORM: f64 = 1e-12;

/// Result of one hypergradient estimate over the upper parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypergradient {
    /// `direct - xi * curvature`.
    pub grad: Vec<f64>,
    /// `grad_M L_val(V_bar, M)`.
    pub direct: Vec<f64>,
    /// Central-difference estimate of the mixed second derivative of `L_tr`
    /// applied to `g`: `[grad_M L_tr(V + eps g) - grad_M L_tr(V - eps g)] / (2 eps)`.
    /// All zeros when the term is skipped.
    pub curvature: Vec<f64>,
    pub xi: f64,
    /// Finite-difference scale; `None` when the term was skipped.
    pub eps: Option<f64>,
    /// `||g||` with `g = grad_V L_val(V_bar, M)`.
    pub probe_norm: f64,
    /// `L_tr(V, M)` at the call's entry point.
    pub train_loss: f64,
    /// `L_val(V_bar, M)`.
    pub val_loss: f64,
    /// Batch metric of the validation evaluation.
    pub val_metric: f64,
}

impl Hypergradient {
    pub fn curvature_norm(&self) -> f64 {
        norm(&self.curvature)
    }

    pub fn curvature_skipped(&self) -> bool {
        self.eps.is_none()
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn axpy(base: &[f64], scale: f64, dir: &[f64]) -> Vec<f64> {
    base.iter().zip(dir).map(|(b, d)| b + scale * d).collect()
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// One-step-unrolled hypergradient with a central-difference curvature term:
///
/// `V_bar = V - xi grad_V L_tr(V, M)`, `g = grad_V L_val(V_bar, M)`,
/// `eps = eps0 / ||g||`, and
/// `grad_M L_val(V_bar, M) - xi [grad_M L_tr(V + eps g, M) - grad_M L_tr(V - eps g, M)] / (2 eps)`.
///
/// The lower parameters are restored bit-exactly before returning, on success
/// and on error. With `xi == 0` the unroll and curvature term vanish and the
/// result is `grad_M L_val(V, M)`.
pub fn hypergradient<P: Bilevel>(
    problem: &mut P,
    batch_tr: &P::Batch,
    batch_val: &P::Batch,
    xi: f64,
    gamma: f64,
    eps0: f64,
) -> Result<Hypergradient> {
    let saved = problem.lower_params();
    let result = probe(problem, &saved, batch_tr, batch_val, xi, gamma, eps0);
    let restore = problem.set_lower_params(&saved);
    let restored = problem.lower_params();
    let identical =
        restored.len() == saved.len() && restored.iter().zip(&saved).all(|(a, b)| a.to_bits() == b.to_bits());
    match (result, restore) {
        (_, Err(e)) => Err(e),
        (Ok(_), Ok(())) if !identical => Err(Error::RestoreFailure),
        (result, Ok(())) => result,
    }
}

fn probe<P: Bilevel>(
    problem: &mut P,
    v: &[f64],
    batch_tr: &P::Batch,
    batch_val: &P::Batch,
    xi: f64,
    gamma: f64,
    eps0: f64,
) -> Result<Hypergradient> {
    let tr = problem.train_objective(batch_tr, gamma)?;
    check_finite(&tr.grad_lower, "lower gradient of the training objective")?;
    if xi != 0.0 {
        problem.set_lower_params(&axpy(v, -xi, &tr.grad_lower))?;
    }
    let val = problem.val_objective(batch_val)?;
    check_finite(&val.grad_upper, "upper gradient of the validation objective")?;
    check_finite(&val.grad_lower, "lower gradient of the validation objective")?;
    let g = &val.grad_lower;
    let probe_norm = norm(g);
    let mut curvature = vec![0.0; val.grad_upper.len()];
    let mut eps = None;
    if xi != 0.0 && probe_norm >= MIN_PROBE_NORM {
        let e = eps0 / probe_norm;
        problem.set_lower_params(&axpy(v, e, g))?;
        let plus = problem.train_objective(batch_tr, gamma)?.grad_upper;
        problem.set_lower_params(&axpy(v, -e, g))?;
        let minus = problem.train_objective(batch_tr, gamma)?.grad_upper;
        for ((c, p), m) in curvature.iter_mut().zip(&plus).zip(&minus) {
            *c = (p - m) / (2.0 * e);
        }
        check_finite(&curvature, "finite-difference curvature")?;
        eps = Some(e);
    }
    let grad = val.grad_upper.iter().zip(&curvature).map(|(d, c)| d - xi * c).collect();
    Ok(Hypergradient {
        grad,
        direct: val.grad_upper,
        curvature,
        xi,
        eps,
        probe_norm,
        train_loss: tr.loss,
        val_loss: val.loss,
        val_metric: val.metric,
    })
}
