//! Central-difference gradient checking against the tape.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max |autodiff - numeric| / (|numeric| + 1e-12) over every parameter entry.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (parameter index, flat entry index) of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

fn evaluate<F>(f: &F, params: &[Tensor], track: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.leaf(p.clone(), track))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    if g.value(out).shape() != (1, 1) {
        return Err(Error::NotScalar(g.value(out).shape()));
    }
    Ok((g, vars, out))
}

/// Compares autodiff gradients of the scalar function `f` with central
/// differences of step `h` at `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(&f, params, true)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut numeric = Vec::with_capacity(params.len());
    let mut perturbed = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let mut num = Tensor::zeros(p.rows(), p.cols());
        for e in 0..p.len() {
            let orig = p.data()[e];
            perturbed[pi].data_mut()[e] = orig + h;
            let (gp, _, op) = evaluate(&f, &perturbed, false)?;
            let fp = gp.value(op).item();
            perturbed[pi].data_mut()[e] = orig - h;
            let (gm, _, om) = evaluate(&f, &perturbed, false)?;
            let fm = gm.value(om).item();
            perturbed[pi].data_mut()[e] = orig;
            let d = (fp - fm) / (2.0 * h);
            if !d.is_finite() {
                return Err(Error::NonFinite("finite-difference probe".into()));
            }
            num.data_mut()[e] = d;
        }
        numeric.push(num);
    }

    let mut max_rel_error = 0.0f64;
    let mut max_abs_error = 0.0f64;
    let mut worst = None;
    for (pi, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (e, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let abs = (av - nv).abs();
            let rel = abs / (nv.abs() + 1e-12);
            max_abs_error = max_abs_error.max(abs);
            if rel > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(rel);
                worst = Some((pi, e));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        max_abs_error,
        worst,
        analytic,
        numeric,
    })
}
