//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the target exits nonzero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use bidora::adapters::{
    direction_matrix, gram_penalty_var, gram_regularizer, merge_weights, AdapterLayer, AdapterMode, LayerVars,
    ParamKind,
};
use bidora::analysis::{
    correlation_slope, delta_direction, delta_magnitude, eigenspectrum, exact_signed_rank_p, spectrum_deviation,
    wilcoxon_signed_rank, WdaPoint,
};
use bidora::autodiff::{Graph, Tensor, Var};
use bidora::bilevel::{
    hypergradient, AnalyticBilevel, Bilevel, BilevelConfig, Engine, Event, InnerLoss, Mode, Phase, TrajectoryLog,
};
use bidora::harness::{BatchSampler, ModelBatch};
use bidora::rng::stream;
use bidora::runner::run::{METRICS_FILE, TRAJECTORY_FILE};
use bidora::runner::{cmd_analyze, cmd_sweep_partition, cmd_train, run_once, ExperimentSpec, Method};
use bidora::Result;
use common::{bits, fd_rel_error, fresh_layer, mean, random_layer, rng, small_model};
use nalgebra::{DVector, Matrix2, Vector2};

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> std::result::Result<(), String> {
    ensure(
        elapsed < Duration::from_secs(limit_secs),
        format!("took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64()),
    )
}

// Criterion 1

fn contract(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.value(out).shape();
    let w = g.constant(Tensor::randn(r, c, 1.0, &mut rng(seed ^ 0x5eed)))?;
    let prod = g.hadamard(out, w)?;
    g.sum(prod)
}

fn signed_away_from_zero(r: usize, c: usize, seed: u64) -> Tensor {
    let mag = Tensor::uniform(r, c, 0.3, 1.5, &mut rng(seed));
    let sign = Tensor::uniform(r, c, -1.0, 1.0, &mut rng(seed + 1));
    mag.zip_map(&sign, "sign", |m, s| if s < 0.0 { -m } else { m }).unwrap()
}

type OpCase = (
    &'static str,
    Box<dyn Fn(u64) -> Vec<Tensor>>,
    Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
);

fn op_cases() -> Vec<OpCase> {
    let n = |r, c, s| Tensor::randn(r, c, 1.0, &mut rng(s));
    vec![
        (
            "matmul",
            Box::new(move |s| vec![n(3, 4, s), n(4, 2, s + 9)]),
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "transpose",
            Box::new(move |s| vec![n(2, 5, s)]),
            Box::new(|g, v| g.transpose(v[0])),
        ),
        (
            "add",
            Box::new(move |s| vec![n(3, 4, s), n(3, 4, s + 9)]),
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        (
            "sub",
            Box::new(move |s| vec![n(3, 4, s), n(3, 4, s + 9)]),
            Box::new(|g, v| g.sub(v[0], v[1])),
        ),
        (
            "scale",
            Box::new(move |s| vec![n(3, 4, s)]),
            Box::new(|g, v| g.scale(v[0], 0.7)),
        ),
        (
            "hadamard",
            Box::new(move |s| vec![n(3, 4, s), n(3, 4, s + 9)]),
            Box::new(|g, v| g.hadamard(v[0], v[1])),
        ),
        (
            "mul_row",
            Box::new(move |s| vec![n(4, 3, s), n(1, 3, s + 9)]),
            Box::new(|g, v| g.mul_row(v[0], v[1])),
        ),
        (
            "div_row",
            Box::new(move |s| vec![n(4, 3, s), signed_away_from_zero(1, 3, s + 9)]),
            Box::new(|g, v| g.div_row(v[0], v[1])),
        ),
        (
            "add_row",
            Box::new(move |s| vec![n(4, 3, s), n(1, 3, s + 9)]),
            Box::new(|g, v| g.add_row(v[0], v[1])),
        ),
        ("sum", Box::new(move |s| vec![n(3, 3, s)]), Box::new(|g, v| g.sum(v[0]))),
        (
            "mean",
            Box::new(move |s| vec![n(3, 3, s)]),
            Box::new(|g, v| g.mean(v[0])),
        ),
        (
            "frobenius_norm_sq",
            Box::new(move |s| vec![n(4, 2, s)]),
            Box::new(|g, v| g.frobenius_norm_sq(v[0])),
        ),
        (
            "relu",
            Box::new(move |s| vec![signed_away_from_zero(4, 3, s)]),
            Box::new(|g, v| g.relu(v[0])),
        ),
        (
            "column_norms",
            Box::new(move |s| vec![n(5, 3, s)]),
            Box::new(|g, v| g.column_norms(v[0])),
        ),
        (
            "softmax_cross_entropy",
            Box::new(move |s| vec![n(5, 3, s).scale(2.0)]),
            Box::new(|g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1, 1, 0])),
        ),
        (
            "mse",
            Box::new(move |s| vec![n(4, 2, s)]),
            Box::new(|g, v| g.mse(v[0], &Tensor::filled(4, 2, -0.3))),
        ),
    ]
}

fn dora_objective(
    layer: &AdapterLayer,
    x: &Tensor,
    labels: &[usize],
    gamma: f64,
    g: &mut Graph,
    v: &[Var],
) -> Result<Var> {
    let vars = LayerVars {
        base: g.constant(layer.base().clone())?,
        bias: g.constant(layer.bias().clone())?,
        magnitude: v[0],
        b: v[1],
        a: v[2],
        delta: None,
    };
    let xv = g.constant(x.clone())?;
    let y = layer.forward_var(g, &vars, xv, None)?;
    let ce = g.softmax_cross_entropy(y, labels)?;
    if gamma == 0.0 {
        return Ok(ce);
    }
    let reg = gram_penalty_var(g, std::slice::from_ref(layer), &[vars])?.expect("dora layer");
    let reg = g.scale(reg, gamma)?;
    g.add(ce, reg)
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (name, inputs, op) in op_cases() {
        for seed in 0..20 {
            let err = fd_rel_error(
                |g: &mut Graph, v: &[Var]| {
                    let out = op(g, v)?;
                    contract(g, out, seed)
                },
                &inputs(seed),
            );
            ensure(err < 1e-6, format!("{name} seed {seed}: {err:e}"))?;
            worst = worst.max(err);
        }
    }
    for seed in 0..20 {
        let layer = random_layer(seed, 5, 4, 2, AdapterMode::Dora);
        let params = vec![layer.magnitude().clone(), layer.b().clone(), layer.a().clone()];
        let x = Tensor::randn(6, 5, 1.0, &mut rng(seed + 77));
        let labels: Vec<usize> = (0..6).map(|i| (i + seed as usize) % 4).collect();
        for gamma in [0.0, 0.1] {
            let err = fd_rel_error(|g, v| dora_objective(&layer, &x, &labels, gamma, g, v), &params);
            ensure(err < 1e-6, format!("dora forward gamma {gamma} seed {seed}: {err:e}"))?;
            worst = worst.max(err);
        }
    }
    within(start.elapsed(), 10)?;
    Ok(format!(
        "max relative error {worst:.2e} over {} ops, forward and penalty, 20 seeds, {:.2}s",
        op_cases().len(),
        start.elapsed().as_secs_f64()
    ))
}

// Criteria 2 and 3

fn dense(x: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
    let mut y = x.matmul(w).unwrap();
    let k = y.cols();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += bias.data()[i % k];
    }
    y
}

fn merge_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (d, k, r) = (4 + seed as usize % 6, 3 + seed as usize % 5, 1 + seed as usize % 3);
        let x = Tensor::randn(20, d, 1.0, &mut rng(seed + 500));
        for mode in [AdapterMode::Lora, AdapterMode::Dora] {
            let layer = random_layer(seed, d, k, r, mode);
            let diff =
                layer
                    .forward(&x)
                    .unwrap()
                    .max_abs_diff(&dense(&x, &merge_weights(&layer).unwrap(), layer.bias()));
            worst = worst.max(diff);
        }
    }
    ensure(worst < 1e-10, format!("max abs error {worst:e}"))?;
    within(start.elapsed(), 5)?;
    Ok(format!("max abs error {worst:.2e} on 100 layers in both modes"))
}

fn init_identity() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let layer = fresh_layer(seed, 6, 5, 2, AdapterMode::Dora);
        ensure(layer.b().data().iter().all(|&v| v == 0.0), "B is not zero at init")?;
        let x = Tensor::randn(10, 6, 1.0, &mut rng(seed));
        worst = worst.max(
            layer
                .forward(&x)
                .unwrap()
                .max_abs_diff(&layer.base_forward(&x).unwrap()),
        );
    }
    let (model, d_tr, _) = small_model(3);
    let base_out = model
        .layers()
        .iter()
        .try_fold(d_tr.inputs().clone(), |h, l| -> Result<Tensor> {
            let y = l.base_forward(&h)?;
            Ok(if std::ptr::eq(l, model.layers().last().unwrap()) {
                y
            } else {
                y.map(|v| v.max(0.0))
            })
        });
    let model_diff = model.predict(d_tr.inputs()).unwrap().max_abs_diff(&base_out.unwrap());
    worst = worst.max(model_diff);
    ensure(worst < 1e-12, format!("max abs error {worst:e}"))?;
    Ok(format!(
        "max abs error {worst:.2e} over 50 layers and a two-layer model"
    ))
}

// Criteria 4 and 5

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// `-C^T (phi''(u) * g)` with `u = V - C M` and `g = V_bar - t`.
fn mixed_hvp(p: &AnalyticBilevel, xi: f64) -> DVector<f64> {
    let u = &p.v - &p.c * &p.m;
    let (dphi, d2phi) = match p.inner {
        InnerLoss::Quadratic => (u.clone(), u.map(|_| 1.0)),
        InnerLoss::Quartic => (u.map(|x| x + x.powi(3)), u.map(|x| 1.0 + 3.0 * x * x)),
    };
    let g = &p.v - dphi * xi - &p.t;
    -(p.c.transpose() * d2phi.component_mul(&g))
}

fn quadratic_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(11);
    let (mut worst_err, mut worst_cos) = (0.0f64, 1.0f64);
    for i in 0..50 {
        let mut p = AnalyticBilevel::random(InnerLoss::Quadratic, 6, 4, &mut r);
        p.v += DVector::from_fn(6, |j, _| 0.1 * (j as f64 - 2.5) * (1.0 + i as f64 / 50.0));
        let expect = mixed_hvp(&p, 0.1);
        let h = hypergradient(&mut p, &(), &(), 0.1, 0.0, 0.01).unwrap();
        worst_err = worst_err.max((DVector::from_vec(h.curvature) - expect).amax());

        let mut q = AnalyticBilevel::random(InnerLoss::Quadratic, 6, 4, &mut r);
        q.solve_inner();
        // With V at C M, dV*/dM = C and the implicit gradient is C^T (C M - t).
        let exact = q.c.transpose() * (&q.c * &q.m - &q.t);
        let h = hypergradient(&mut q, &(), &(), 0.05, 0.0, 0.01).unwrap();
        worst_cos = worst_cos.min(cosine(&h.grad, exact.as_slice()));
    }
    ensure(worst_err < 1e-10, format!("finite-difference term error {worst_err:e}"))?;
    ensure(worst_cos > 1.0 - 1e-6, format!("min cosine {worst_cos}"))?;
    within(start.elapsed(), 10)?;
    Ok(format!(
        "max term error {worst_err:.2e}, min cosine 1 - {:.1e} over 50 instances",
        1.0 - worst_cos
    ))
}

fn eps_order() -> Outcome {
    let mut p = AnalyticBilevel::random(InnerLoss::Quartic, 5, 3, &mut rng(12));
    p.v += DVector::from_fn(5, |i, _| 0.15 * (i as f64 + 1.0));
    let expect = mixed_hvp(&p, 0.1);
    let errs: Vec<f64> = [0.08, 0.04, 0.02, 0.01]
        .iter()
        .map(|&eps0| {
            let h = hypergradient(&mut p.clone(), &(), &(), 0.1, 0.0, eps0).unwrap();
            (DVector::from_vec(h.curvature) - &expect).norm()
        })
        .collect();
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    let text = ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ");
    ensure(ratios.iter().all(|r| (3.5..=4.5).contains(r)), format!("ratios {text}"))?;
    Ok(format!("error ratios per halving {text}"))
}

// Criterion 6

fn restore_and_separation() -> Outcome {
    let (mut model, d_tr, d_val) = small_model(5);
    let cfg = BilevelConfig {
        gamma: 1e-3,
        search_steps: 500,
        ..BilevelConfig::default()
    };
    let mut engine = Engine::new(&model, &cfg).unwrap();
    let mut tr = BatchSampler::new(d_tr.len(), 16, 5, stream::BATCH_TRAIN).unwrap();
    let mut va = BatchSampler::new(d_val.len(), 16, 5, stream::BATCH_VAL).unwrap();
    for step in 0..500u64 {
        let btr = ModelBatch {
            data: tr.next_batch(&d_tr),
            mask_seed: step,
        };
        let bval = ModelBatch {
            data: va.next_batch(&d_val),
            mask_seed: step,
        };
        let v0 = bits(&model.lower_params());
        let m0 = bits(&model.upper_params());
        engine
            .upper_step(&mut model, &btr, &bval)
            .map_err(|e| format!("step {step}: {e}"))?;
        ensure(
            bits(&model.lower_params()) == v0,
            format!("upper step {step} changed B or A"),
        )?;
        let m1 = bits(&model.upper_params());
        ensure(m1 != m0, format!("upper step {step} left m unchanged"))?;
        engine
            .lower_step(&mut model, &btr)
            .map_err(|e| format!("step {step}: {e}"))?;
        ensure(
            bits(&model.upper_params()) == m1,
            format!("lower step {step} changed m"),
        )?;
    }
    Ok("500 alternating steps, lower parameters bit-identical around every hypergradient".into())
}

// Criterion 7

/// Plain gradient descent on a single DoRA layer fitting a random linear map,
/// returning the final spectrum deviation of its direction matrix.
fn train_toy_layer(gamma: f64) -> f64 {
    let mut layer = fresh_layer(21, 8, 4, 2, AdapterMode::Dora);
    let x = Tensor::randn(64, 8, 1.0, &mut rng(22));
    let target = x.matmul(&Tensor::randn(8, 4, 1.0, &mut rng(23))).unwrap();
    let kinds = [ParamKind::Magnitude, ParamKind::B, ParamKind::A];
    for _ in 0..400 {
        let mut g = Graph::new();
        let vars = layer.register(&mut g, true).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let y = layer.forward_var(&mut g, &vars, xv, None).unwrap();
        let mut loss = g.mse(y, &target).unwrap();
        if gamma > 0.0 {
            let reg = gram_penalty_var(&mut g, std::slice::from_ref(&layer), std::slice::from_ref(&vars))
                .unwrap()
                .unwrap();
            let reg = g.scale(reg, gamma).unwrap();
            loss = g.add(loss, reg).unwrap();
        }
        g.backward(loss).unwrap();
        let grads = [
            g.grad_or_zeros(vars.magnitude),
            g.grad_or_zeros(vars.b),
            g.grad_or_zeros(vars.a),
        ];
        for (kind, grad) in kinds.iter().zip(grads) {
            let p = layer.param(*kind).unwrap().sub(&grad.scale(0.01)).unwrap();
            layer.set_param(*kind, p).unwrap();
        }
    }
    spectrum_deviation(&eigenspectrum(&direction_matrix(&layer).unwrap(), 64).unwrap())
}

fn regularizer_semantics() -> Outcome {
    let mut ortho = Tensor::zeros(5, 3);
    for j in 0..3 {
        ortho.set(j + 1, j, 1.0);
    }
    let at_ortho = gram_regularizer(&[AdapterLayer::new(
        ortho.clone(),
        Tensor::zeros(1, 3),
        AdapterMode::Dora,
        2,
        4.0,
        &mut rng(0),
    )
    .unwrap()])
    .unwrap();
    ensure(at_ortho < 1e-12, format!("penalty {at_ortho:e} at orthonormal columns"))?;
    let mut skew = ortho.clone();
    skew.set(1, 1, 0.5);
    for w in [skew, Tensor::randn(5, 3, 1.0, &mut rng(1))] {
        let layer = AdapterLayer::new(w, Tensor::zeros(1, 3), AdapterMode::Dora, 2, 4.0, &mut rng(0)).unwrap();
        ensure(
            gram_regularizer(&[layer]).unwrap() > 0.0,
            "zero penalty at non-orthonormal columns",
        )?;
    }
    let (plain, regularized) = (train_toy_layer(0.0), train_toy_layer(0.5));
    ensure(
        regularized < plain,
        format!("deviation {regularized:.4} with penalty vs {plain:.4} without"),
    )?;
    Ok(format!(
        "spectrum deviation {regularized:.4} with penalty vs {plain:.4} without"
    ))
}

// Criterion 8

fn overfitting_gap() -> Outcome {
    let start = Instant::now();
    let spec = ExperimentSpec::default();
    let gaps = |method| -> Vec<f64> {
        let s = ExperimentSpec { method, ..spec.clone() };
        (0..10)
            .map(|seed| run_once(&s, seed, None).unwrap().metrics.gap.gap)
            .collect()
    };
    let (dora, bidora) = (gaps(Method::Dora), gaps(Method::Bidora));
    let p = wilcoxon_signed_rank(&dora, &bidora)
        .map_err(|e| e.to_string())?
        .p_greater;
    let detail = format!(
        "mean gap bidora {:.4} vs dora {:.4}, one-sided p {p:.4}, n_target {}, {:.0}s",
        mean(&bidora),
        mean(&dora),
        spec.task.cluster.n_target,
        start.elapsed().as_secs_f64()
    );
    ensure(spec.task.cluster.n_target <= 200, "target set too large")?;
    ensure(mean(&bidora) <= mean(&dora) && p < 0.2, detail.clone())?;
    within(start.elapsed(), 600)?;
    Ok(detail)
}

// Criterion 9

fn ols_slope(xy: &[(f64, f64)]) -> f64 {
    let n = xy.len() as f64;
    let (sx, sy) = (xy.iter().map(|p| p.0).sum::<f64>(), xy.iter().map(|p| p.1).sum::<f64>());
    let sxx: f64 = xy.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = xy.iter().map(|p| p.0 * p.1).sum();
    Matrix2::new(n, sx, sx, sxx).lu().solve(&Vector2::new(sy, sxy)).unwrap()[1]
}

fn tiny_spec(method: Method, out: &Path) -> ExperimentSpec {
    let mut s = ExperimentSpec {
        method,
        out: out.to_path_buf(),
        seeds: vec![0, 1, 2],
        ..Default::default()
    };
    s.task.cluster.n_pretrain = 300;
    s.task.cluster.n_test = 300;
    s.model.hidden = vec![24];
    s.model.pretrain_steps = 60;
    s.train.train_steps = 200;
    s
}

fn wda_correctness() -> Outcome {
    let w = Tensor::randn(7, 4, 1.0, &mut rng(31));
    let id = (delta_direction(&w, &w).unwrap(), delta_magnitude(&w, &w).unwrap());
    ensure(id.0.abs() < 1e-15 && id.1 == 0.0, format!("identity gives {id:?}"))?;
    let scaled = delta_direction(&w, &w.scale(3.0)).unwrap();
    ensure(
        scaled.abs() < 1e-15,
        format!("positive scaling gives delta D {scaled:e}"),
    )?;
    let antipodal = delta_direction(&w, &w.scale(-1.0)).unwrap();
    ensure(
        (antipodal - 2.0).abs() < 1e-15,
        format!("antipodal gives delta D {antipodal}"),
    )?;

    let mut r = rng(32);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        use rand::Rng;
        let xy: Vec<(f64, f64)> = (0..30)
            .map(|_| (r.random_range(0.0..1.0), r.random_range(-1.0..1.0)))
            .collect();
        let pts: Vec<WdaPoint> = xy
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| WdaPoint {
                layer: 0,
                step: i,
                delta_d: x,
                delta_m: y,
            })
            .collect();
        worst = worst.max((correlation_slope(&pts).unwrap() - ols_slope(&xy)).abs());
    }
    ensure(worst < 1e-10, format!("slope error {worst:e}"))?;

    // Sign check on the toy task; reported, not gating.
    let dir = tempfile::tempdir().unwrap();
    for m in [Method::Lora, Method::Dora] {
        cmd_train(&tiny_spec(m, dir.path())).unwrap();
    }
    let report = cmd_analyze(
        &[dir.path().join("lora"), dir.path().join("dora")],
        &[],
        &dir.path().join("analysis"),
    )
    .unwrap();
    let slope = |name: &str| report.slopes.iter().find(|s| s.method == name).and_then(|s| s.slope);
    let sign = match (slope("lora"), slope("dora")) {
        (Some(l), Some(d)) => format!("lora k {l:.3} {} dora k {d:.3}", if l >= d { ">=" } else { "<" }),
        _ => "slopes unavailable".into(),
    };
    Ok(format!(
        "identities exact, slope error {worst:.1e}; non-gating sign check: {sign}"
    ))
}

// Criterion 10

fn partition_sweep() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        seeds: (0..10).collect(),
        out: dir.path().to_path_buf(),
        ..Default::default()
    };
    let table = cmd_sweep_partition(&spec, &[0.8, 1.0]).map_err(|e| e.to_string())?;
    let (a, b) = (table.mean_for(0.8).unwrap(), table.mean_for(1.0).unwrap());
    let detail = format!("mean test accuracy {a:.4} at 0.8 vs {b:.4} at 1.0 over 10 seeds");
    ensure(b < a, detail.clone())?;
    Ok(detail)
}

// Criterion 11

fn train_log(mode: Mode, dir: &Path) -> TrajectoryLog {
    let mut spec = ExperimentSpec {
        method: Method::Bidora,
        out: dir.to_path_buf(),
        ..Default::default()
    };
    spec.task.cluster.n_pretrain = 300;
    spec.model.hidden = vec![24];
    spec.model.pretrain_steps = 60;
    spec.train.search_steps = 60;
    spec.train.retrain_steps = 40;
    spec.train.eval_every = 20;
    spec.train.mode = mode;
    let run = &cmd_train(&spec).unwrap()[0];
    TrajectoryLog::read(&run.join(TRAJECTORY_FILE)).unwrap()
}

fn ablation_contracts() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let train_events = |log: &TrajectoryLog, phase: Phase| -> Vec<Event> {
        log.in_phase(phase)
            .filter(|r| matches!(r.event, Event::Train { .. }))
            .map(|r| r.event.clone())
            .collect()
    };

    let log = train_log(Mode::NoRetrain, dir.path());
    ensure(
        log.in_phase(Phase::Retrain).count() == 0,
        "no_retrain logged retraining records",
    )?;

    let log = train_log(Mode::XiZero, dir.path());
    let uppers: Vec<&Event> = log
        .records()
        .iter()
        .map(|r| &r.event)
        .filter(|e| matches!(e, Event::Upper { .. }))
        .collect();
    ensure(!uppers.is_empty(), "xi_zero logged no upper steps")?;
    for e in &uppers {
        if let Event::Upper {
            curvature_norm,
            eps,
            xi,
            ..
        } = e
        {
            ensure(
                *curvature_norm == 0.0 && eps.is_none() && *xi == 0.0,
                "xi_zero used a curvature term",
            )?;
        }
    }

    let full = train_log(Mode::Full, dir.path());
    let full_regularized = full
        .records()
        .iter()
        .any(|r| matches!(r.event, Event::Train { reg_value, gamma, .. } if reg_value > 0.0 && gamma > 0.0));
    ensure(full_regularized, "full mode never applied the penalty")?;
    let log = train_log(Mode::NoReg, dir.path());
    for r in log.records() {
        if let Event::Train {
            loss_tr,
            task_loss,
            reg_value,
            gamma,
            ..
        } = r.event
        {
            ensure(
                gamma == 0.0 && reg_value == 0.0 && loss_tr == task_loss,
                "no_reg loss includes the penalty",
            )?;
        }
    }

    let log = train_log(Mode::RetrainMagnitude, dir.path());
    let retrain = train_events(&log, Phase::Retrain);
    ensure(!retrain.is_empty(), "retrain_magnitude logged no retraining")?;
    let mut moved_m = false;
    for e in &retrain {
        if let Event::Train {
            lower_update_norm,
            upper_update_norm,
            ..
        } = e
        {
            ensure(*lower_update_norm == 0.0, "retrain_magnitude moved B or A")?;
            moved_m |= *upper_update_norm > 0.0;
        }
    }
    ensure(moved_m, "retrain_magnitude never moved m")?;
    Ok(format!(
        "no_retrain, xi_zero ({} upper steps), no_reg, retrain_magnitude ({} retrain steps) contracts hold",
        uppers.len(),
        retrain.len()
    ))
}

// Criterion 12

fn enumerate_tails(diffs: &[f64]) -> (f64, f64) {
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let rank = |a: f64| {
        let below = abs.iter().filter(|&&b| b < a).count() as f64;
        let equal = abs.iter().filter(|&&b| b == a).count() as f64;
        below + (equal + 1.0) / 2.0
    };
    let ranks: Vec<f64> = abs.iter().map(|&a| rank(a)).collect();
    let observed: f64 = ranks.iter().zip(diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let n = diffs.len();
    let (mut ge, mut le) = (0u32, 0u32);
    for pattern in 0u32..(1 << n) {
        let w: f64 = (0..n).filter(|i| pattern >> i & 1 == 1).map(|i| ranks[i]).sum();
        ge += u32::from(w >= observed - 1e-9);
        le += u32::from(w <= observed + 1e-9);
    }
    let all = f64::from(1u32 << n);
    (f64::from(ge) / all, f64::from(le) / all)
}

fn wilcoxon_exactness() -> Outcome {
    use rand::Rng;
    let mut r = rng(41);
    let mut cases = 0;
    for n in 1..=12 {
        for trial in 0..25 {
            let diffs: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = r.random_range(-2.0..2.0);
                    let v = if trial % 3 == 0 { (v * 2.0).round() / 2.0 } else { v };
                    if v == 0.0 {
                        0.5
                    } else {
                        v
                    }
                })
                .collect();
            let (ge, le) = enumerate_tails(&diffs);
            let (pg, pl) = exact_signed_rank_p(&diffs).map_err(|e| e.to_string())?;
            ensure(
                (pg - ge).abs() < 1e-12 && (pl - le).abs() < 1e-12,
                format!("n {n}: {pg} vs {ge}"),
            )?;
            if n >= 5 {
                let w = wilcoxon_signed_rank(&diffs, &vec![0.0; n]).map_err(|e| e.to_string())?;
                ensure((w.p_greater - ge).abs() < 1e-12, format!("test p at n {n}"))?;
            }
            cases += 1;
        }
    }
    let p5 = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5])
        .unwrap()
        .p_greater;
    ensure(p5 == 0.03125, format!("n = 5 all positive gives {p5}"))?;
    Ok(format!(
        "{cases} cases for n = 1..12 match enumeration; n = 5 all positive p = {p5}"
    ))
}

// Criterion 13

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = &cmd_train(&tiny_spec(Method::Bidora, a.path())).unwrap()[0];
    let rb = &cmd_train(&tiny_spec(Method::Bidora, b.path())).unwrap()[0];
    let (ma, mb) = (
        std::fs::read(ra.join(METRICS_FILE)).unwrap(),
        std::fs::read(rb.join(METRICS_FILE)).unwrap(),
    );
    ensure(ma == mb, "metrics files differ")?;
    Ok(format!(
        "{} identical bytes of metrics across two invocations",
        ma.len()
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 13] = [
        ("gradient integrity", gradient_integrity),
        ("merge equivalence", merge_equivalence),
        ("initialization identity", init_identity),
        ("quadratic hypergradient oracle", quadratic_oracle),
        ("finite-difference order", eps_order),
        ("restore and separation", restore_and_separation),
        ("regularizer semantics", regularizer_semantics),
        ("overfitting gap", overfitting_gap),
        ("weight decomposition analysis", wda_correctness),
        ("partition sweep", partition_sweep),
        ("ablation contracts", ablation_contracts),
        ("signed-rank exactness", wilcoxon_exactness),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                println!("FAIL criterion {} {name}: {detail} [{secs:.1}s]", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria {failed:?}");
        std::process::exit(1);
    }
}
