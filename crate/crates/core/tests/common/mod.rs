//! Helpers shared by the integration tests: an independent central-difference
//! gradient and random layer builders.
#![allow(dead_code)]

use bidora::adapters::{AdapterLayer, AdapterMode, ParamKind};
use bidora::autodiff::{Graph, Tensor, Var};
use bidora::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Value of a scalar graph function at `params`, recorded without gradients.
pub fn eval<F>(f: &F, params: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone()).unwrap()).collect();
    let out = f(&mut g, &vars).unwrap();
    g.value(out).item()
}

/// Tape gradients of a scalar graph function.
pub fn tape_grad<F>(f: &F, params: &[Tensor]) -> Vec<Tensor>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone()).unwrap()).collect();
    let out = f(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    vars.iter().map(|&v| g.grad_or_zeros(v)).collect()
}

/// Central differences with step `h`, one entry at a time.
pub fn numeric_grad<F>(f: &F, params: &[Tensor], h: f64) -> Vec<Tensor>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work = params.to_vec();
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut out = Tensor::zeros(p.rows(), p.cols());
            for e in 0..p.len() {
                let orig = p.data()[e];
                work[i].data_mut()[e] = orig + h;
                let fp = eval(f, &work);
                work[i].data_mut()[e] = orig - h;
                let fm = eval(f, &work);
                work[i].data_mut()[e] = orig;
                out.data_mut()[e] = (fp - fm) / (2.0 * h);
            }
            out
        })
        .collect()
}

/// Largest tensor-wise relative error `||a - n|| / max(||a||, ||n||)`
/// between tape and central-difference gradients; tensors whose gradients
/// both vanish count as exact.
pub fn fd_rel_error<F>(f: F, params: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let tape = tape_grad(&f, params);
    let numeric = numeric_grad(&f, params, 1e-5);
    tape.iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let diff = a.sub(n).unwrap().frobenius_norm_sq().sqrt();
            let scale = a.frobenius_norm_sq().sqrt().max(n.frobenius_norm_sq().sqrt());
            if scale < 1e-12 {
                diff
            } else {
                diff / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Random layer with non-trivial trainable tensors (B != 0, m away from the
/// column norms), so every gradient path is exercised.
pub fn random_layer(seed: u64, d: usize, k: usize, r: usize, mode: AdapterMode) -> AdapterLayer {
    let mut rng = rng(seed);
    let mut layer = AdapterLayer::new(
        Tensor::randn(d, k, 1.0, &mut rng),
        Tensor::randn(1, k, 0.1, &mut rng),
        mode,
        r,
        2.0 * r as f64,
        &mut rng,
    )
    .unwrap();
    match mode {
        AdapterMode::Full => layer
            .set_param(ParamKind::Delta, Tensor::randn(d, k, 0.3, &mut rng))
            .unwrap(),
        _ => layer
            .set_param(ParamKind::B, Tensor::randn(d, r, 0.5, &mut rng))
            .unwrap(),
    }
    if mode == AdapterMode::Dora {
        layer
            .set_param(ParamKind::Magnitude, Tensor::uniform(1, k, 0.5, 2.0, &mut rng))
            .unwrap();
    }
    layer
}

/// Freshly initialised layer (B = 0, m = column norms of W0).
pub fn fresh_layer(seed: u64, d: usize, k: usize, r: usize, mode: AdapterMode) -> AdapterLayer {
    let mut rng = rng(seed);
    AdapterLayer::new(
        Tensor::randn(d, k, 1.0, &mut rng),
        Tensor::randn(1, k, 0.1, &mut rng),
        mode,
        r,
        2.0 * r as f64,
        &mut rng,
    )
    .unwrap()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// A pretrained two-layer DoRA model on a small cluster task, with its
/// training and validation splits.
pub fn small_model(
    seed: u64,
) -> (
    bidora::harness::AdapterModel,
    bidora::harness::Dataset,
    bidora::harness::Dataset,
) {
    use bidora::harness::{
        make_cluster_task, pretrain_base, split, AdapterModel, AdapterSpec, ClusterTaskSpec, ModelShape,
    };
    let spec = ClusterTaskSpec {
        dim: 8,
        n_pretrain: 400,
        n_target: 80,
        n_test: 100,
        ..ClusterTaskSpec::default()
    };
    let task = make_cluster_task(&spec, seed).unwrap();
    let shape = ModelShape {
        input_dim: 8,
        hidden: vec![12],
        output_dim: spec.num_classes,
    };
    let base = pretrain_base(&shape, &task.pretrain, 60, seed).unwrap();
    let adapter = AdapterSpec {
        rank: 2,
        alpha: 4.0,
        ..AdapterSpec::default()
    };
    let model = AdapterModel::from_base(&base, &adapter, seed).unwrap();
    let parts = split(&task.target, 0.8, seed).unwrap();
    (model, parts.train, parts.val)
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
