use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapters::{gram_penalty_var, AdapterLayer, AdapterMode, LayerVars, ParamKind};
use crate::autodiff::{grad_check, Graph, Tensor, Var, DEFAULT_STEP};
use crate::bilevel::{hypergradient, AnalyticBilevel, Hypergradient, InnerLoss};
use crate::error::Result;

/// Hypergradient estimator under test: `(problem, xi, eps0) -> estimate`.
pub type Estimator<'a> = &'a dyn Fn(&mut AnalyticBilevel, f64, f64) -> Result<Hypergradient>;

/// The library estimator on an analytic problem.
pub fn library_estimator(problem: &mut AnalyticBilevel, xi: f64, eps0: f64) -> Result<Hypergradient> {
    hypergradient(problem, &(), &(), xi, 0.0, eps0)
}

pub const ORACLE_INSTANCES: usize = 50;
pub const GRAD_CHECK_SEEDS: u64 = 20;
pub const QUARTIC_EPS0: [f64; 4] = [0.08, 0.04, 0.02, 0.01];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    /// Measured error; the check passes when it is at most `tolerance`.
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub checks: Vec<OracleCheck>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&OracleCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// One line per check.
    pub fn render(&self) -> String {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} {:<28} error {:.3e} (tolerance {:.1e}) {}\n",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.measured,
                    c.tolerance,
                    c.detail
                )
            })
            .collect()
    }
}

fn check(name: &str, measured: std::result::Result<f64, String>, tolerance: f64, detail: String) -> OracleCheck {
    match measured {
        Ok(m) => OracleCheck {
            name: name.into(),
            measured: m,
            tolerance,
            passed: m <= tolerance,
            detail,
        },
        Err(e) => OracleCheck {
            name: name.into(),
            measured: f64::INFINITY,
            tolerance,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Probe direction `g = V_bar - t` recomputed from the problem definition.
fn probe_direction(p: &AnalyticBilevel, xi: f64) -> DVector<f64> {
    let u = &p.v - &p.c * &p.m;
    let dphi = match p.inner {
        InnerLoss::Quadratic => u,
        InnerLoss::Quartic => u.map(|x| x + x * x * x),
    };
    &p.v - dphi * xi - &p.t
}

fn curvature_error(p: &AnalyticBilevel, h: &Hypergradient, xi: f64) -> f64 {
    let expect = p.mixed_hvp(&p.v, &probe_direction(p, xi));
    h.curvature
        .iter()
        .zip(expect.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn scalar_case(est: Estimator) -> Vec<OracleCheck> {
    let xi = 0.1;
    let mut p = AnalyticBilevel::scalar(1.0, 1.0, 2.0, 2.0);
    let h = est(&mut p, xi, 0.01).map_err(|e| e.to_string());
    let exact = 1.0;
    vec![
        check(
            "scalar_estimate",
            h.as_ref().map(|h| (h.grad[0] - 0.1).abs()).map_err(Clone::clone),
            1e-10,
            "c=1 m=2 t=1 xi=0.1, expected 0.1".into(),
        ),
        check(
            "scalar_direction",
            h.map(|h| 1.0 - cosine(&h.grad, &[exact])),
            1e-12,
            "1 - cosine against the exact value 1.0".into(),
        ),
    ]
}

fn quadratic_battery(est: Estimator) -> Vec<OracleCheck> {
    let xi = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(0x0a11);
    let mut fd = 0.0f64;
    let mut worst_cos = 1.0f64;
    let mut run = || -> Result<()> {
        for i in 0..ORACLE_INSTANCES {
            let (n, m) = (2 + i % 5, 1 + i % 4);
            let mut p = AnalyticBilevel::random(InnerLoss::Quadratic, n, m, &mut rng);
            // Curvature exactness holds anywhere; move V off the optimum first.
            let off =
                p.v.map(|x| x + Distribution::<f64>::sample(&StandardNormal, &mut rng) * 0.5);
            let mut q = AnalyticBilevel { v: off, ..p.clone() };
            let h = est(&mut q, xi, 0.01)?;
            fd = fd.max(curvature_error(&q, &h, xi));

            p.solve_inner();
            let h = est(&mut p, xi, 0.01)?;
            let exact = crate::bilevel::exact_hypergradient_oracle(&p)?;
            worst_cos = worst_cos.min(cosine(&h.grad, exact.as_slice()));
        }
        Ok(())
    };
    let outcome = run().map_err(|e| e.to_string());
    let fail = |v: f64| outcome.clone().map(|_| v);
    vec![
        check(
            "quadratic_fd_exactness",
            fail(fd),
            1e-10,
            format!("max |fd - mixed hvp| over {ORACLE_INSTANCES} instances"),
        ),
        check(
            "quadratic_cosine",
            fail(1.0 - worst_cos),
            1e-6,
            format!("1 - min cosine to the exact hypergradient over {ORACLE_INSTANCES} instances"),
        ),
    ]
}

fn quartic_battery(est: Estimator) -> Vec<OracleCheck> {
    let xi = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(0x4444);
    let mut ratios = Vec::new();
    let mut run = || -> Result<()> {
        for _ in 0..5 {
            let mut p = AnalyticBilevel::random(InnerLoss::Quartic, 4, 3, &mut rng);
            p.v =
                p.v.map(|x| x + Distribution::<f64>::sample(&StandardNormal, &mut rng) * 0.3);
            let errors = QUARTIC_EPS0
                .iter()
                .map(|&eps0| Ok(curvature_error(&p, &est(&mut p.clone(), xi, eps0)?, xi)))
                .collect::<Result<Vec<f64>>>()?;
            ratios.extend(errors.windows(2).map(|w| w[0] / w[1]));
        }
        Ok(())
    };
    let outcome = run().map_err(|e| e.to_string());
    let measured = outcome.map(|_| ratios.iter().map(|r| (r - 4.0).abs()).fold(0.0, f64::max));
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    vec![check(
        "quartic_eps_order",
        measured,
        0.5,
        format!("max |ratio - 4| over halvings of eps0, ratios in [{lo:.4}, {hi:.4}]"),
    )]
}

fn random_layer(seed: u64, mode: AdapterMode) -> Result<AdapterLayer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, k, r) = (5, 4, 2);
    let mut layer = AdapterLayer::new(
        Tensor::randn(d, k, 1.0, &mut rng),
        Tensor::randn(1, k, 0.1, &mut rng),
        mode,
        r,
        4.0,
        &mut rng,
    )?;
    match mode {
        AdapterMode::Full => layer.set_param(ParamKind::Delta, Tensor::randn(d, k, 0.3, &mut rng))?,
        _ => layer.set_param(ParamKind::B, Tensor::randn(d, r, 0.5, &mut rng))?,
    }
    if mode == AdapterMode::Dora {
        layer.set_param(ParamKind::Magnitude, Tensor::uniform(1, k, 0.5, 2.0, &mut rng))?;
    }
    Ok(layer)
}

/// Loss of `layer` with its trainable tensors replaced by `params`.
fn layer_loss(layer: &AdapterLayer, x: &Tensor, labels: &[usize], g: &mut Graph, params: &[Var]) -> Result<Var> {
    let kinds = layer.trainable_kinds();
    let mut slot = |kind: ParamKind, value: &Tensor| -> Result<Var> {
        match kinds.iter().position(|&k| k == kind) {
            Some(i) => Ok(params[i]),
            None => g.constant(value.clone()),
        }
    };
    let magnitude = slot(ParamKind::Magnitude, layer.magnitude())?;
    let b = slot(ParamKind::B, layer.b())?;
    let a = slot(ParamKind::A, layer.a())?;
    let delta = match layer.delta() {
        Some(d) => Some(slot(ParamKind::Delta, d)?),
        None => None,
    };
    let vars = LayerVars {
        base: g.constant(layer.base().clone())?,
        bias: g.constant(layer.bias().clone())?,
        magnitude,
        b,
        a,
        delta,
    };
    let xv = g.constant(x.clone())?;
    let y = layer.forward_var(g, &vars, xv, None)?;
    let loss = g.softmax_cross_entropy(y, labels)?;
    match gram_penalty_var(g, std::slice::from_ref(layer), &[vars])? {
        Some(reg) => {
            let reg = g.scale(reg, 0.01)?;
            g.add(loss, reg)
        }
        None => Ok(loss),
    }
}

fn grad_check_sweep() -> Vec<OracleCheck> {
    [AdapterMode::Dora, AdapterMode::Lora, AdapterMode::Full]
        .into_iter()
        .map(|mode| {
            let measured = (0..GRAD_CHECK_SEEDS).try_fold(0.0f64, |worst, seed| {
                let layer = random_layer(seed, mode)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
                let x = Tensor::randn(6, layer.in_dim(), 1.0, &mut rng);
                let labels: Vec<usize> = (0..6).map(|i| (i + seed as usize) % layer.out_dim()).collect();
                let params: Vec<Tensor> = layer
                    .trainable_kinds()
                    .iter()
                    .filter_map(|&k| layer.param(k).cloned())
                    .collect();
                let report = grad_check(|g, v| layer_loss(&layer, &x, &labels, g, v), &params, DEFAULT_STEP)?;
                Ok(worst.max(report.max_rel_error))
            });
            let measured = measured.map_err(|e: crate::error::Error| e.to_string());
            check(
                &format!("grad_check_{}", format!("{mode:?}").to_lowercase()),
                measured,
                1e-6,
                format!("max relative error over {GRAD_CHECK_SEEDS} seeds, cross-entropy (plus Gram penalty for dora)"),
            )
        })
        .collect()
}

/// Runs every hypergradient oracle against `est`, plus gradient checks of the
/// adapter forward passes. Failures are part of the report, not errors.
pub fn cmd_oracle_check(est: Estimator) -> OracleReport {
    let mut checks = scalar_case(est);
    checks.extend(quadratic_battery(est));
    checks.extend(quartic_battery(est));
    checks.extend(grad_check_sweep());
    OracleReport { checks }
}
