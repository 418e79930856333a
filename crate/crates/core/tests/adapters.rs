mod common;

use bidora::adapters::{
    direction_matrix, dora_forward, gram_penalty_var, gram_regularizer, layers_from_json, layers_to_json, load_layers,
    lora_forward, merge_weights, save_layers, AdapterLayer, AdapterMode, LayerVars, ParamGroup, ParamKind,
};
use bidora::autodiff::{Graph, Tensor, Var};
use bidora::Error;
use common::{fd_rel_error, fresh_layer, random_layer, rng};
use proptest::prelude::*;

fn dense(x: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
    let mut y = x.matmul(w).unwrap();
    let k = y.cols();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += bias.data()[i % k];
    }
    y
}

/// Normalize-then-scale computed entry by entry, independent of the tape.
fn dora_reference(layer: &AdapterLayer, x: &Tensor) -> Tensor {
    let (d, k) = layer.base().shape();
    let s = layer.alpha() / layer.rank() as f64;
    let mut w = Tensor::zeros(d, k);
    for i in 0..d {
        for j in 0..k {
            let ba: f64 = (0..layer.rank())
                .map(|t| layer.b().get(i, t) * layer.a().get(t, j))
                .sum();
            w.set(i, j, layer.base().get(i, j) + s * ba);
        }
    }
    for j in 0..k {
        let norm = (0..d).map(|i| w.get(i, j).powi(2)).sum::<f64>().sqrt();
        for i in 0..d {
            w.set(i, j, layer.magnitude().get(0, j) * w.get(i, j) / norm);
        }
    }
    dense(x, &w, layer.bias())
}

#[test]
fn merged_forward_matches_adapter_forward_on_100_layers() {
    for seed in 0..100 {
        let (d, k, r) = (3 + seed as usize % 5, 2 + seed as usize % 4, 1 + seed as usize % 2);
        let x = Tensor::randn(100, d, 1.0, &mut rng(seed + 1000));
        for mode in [AdapterMode::Lora, AdapterMode::Dora] {
            let layer = random_layer(seed, d, k, r, mode);
            let merged = dense(&x, &merge_weights(&layer).unwrap(), layer.bias());
            let direct = match mode {
                AdapterMode::Lora => lora_forward(&layer, &x).unwrap(),
                _ => dora_forward(&layer, &x).unwrap(),
            };
            assert!(merged.max_abs_diff(&direct) < 1e-10, "seed {seed} {mode:?}");
        }
    }
}

#[test]
fn dora_forward_matches_straight_line_reference() {
    for seed in 0..20 {
        let layer = random_layer(seed, 6, 4, 2, AdapterMode::Dora);
        let x = Tensor::randn(5, 6, 1.0, &mut rng(seed + 9));
        assert!(
            dora_forward(&layer, &x)
                .unwrap()
                .max_abs_diff(&dora_reference(&layer, &x))
                < 1e-12
        );
    }
}

#[test]
fn fresh_layers_reproduce_the_base() {
    for seed in 0..20 {
        for mode in [AdapterMode::Lora, AdapterMode::Dora, AdapterMode::Full] {
            let layer = fresh_layer(seed, 7, 5, 3, mode);
            assert_eq!(layer.b(), &Tensor::zeros(7, 3));
            if mode == AdapterMode::Dora {
                assert_eq!(layer.magnitude(), &layer.base().column_norms());
            }
            let x = Tensor::randn(8, 7, 1.0, &mut rng(seed));
            let diff = layer
                .forward(&x)
                .unwrap()
                .max_abs_diff(&layer.base_forward(&x).unwrap());
            assert!(diff < 1e-12, "seed {seed} {mode:?}: {diff:e}");
        }
    }
}

#[test]
fn mode_specific_forwards_reject_other_modes() {
    let layer = fresh_layer(0, 3, 3, 1, AdapterMode::Lora);
    assert!(matches!(
        dora_forward(&layer, &Tensor::zeros(1, 3)),
        Err(Error::InvalidConfig(_))
    ));
    let layer = fresh_layer(0, 3, 3, 1, AdapterMode::Dora);
    assert!(matches!(
        lora_forward(&layer, &Tensor::zeros(1, 3)),
        Err(Error::InvalidConfig(_))
    ));
}

/// `sum_{i,j} (d_i . d_j - [i == j])^2` by a double loop over columns.
fn gram_brute_force(d: &Tensor) -> f64 {
    let k = d.cols();
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            let dot: f64 = d.column_vec(i).iter().zip(d.column_vec(j)).map(|(a, b)| a * b).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            total += (dot - target).powi(2);
        }
    }
    total
}

#[test]
fn gram_regularizer_matches_brute_force() {
    for seed in 0..20 {
        let layers = vec![
            random_layer(seed, 6, 4, 2, AdapterMode::Dora),
            random_layer(seed + 50, 4, 3, 2, AdapterMode::Dora),
        ];
        let expect: f64 = layers
            .iter()
            .map(|l| gram_brute_force(&direction_matrix(l).unwrap()))
            .sum();
        let got = gram_regularizer(&layers).unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect.max(1.0), "seed {seed}");
    }
}

#[test]
fn gram_regularizer_zero_only_at_orthonormal_columns() {
    // W0 with orthonormal columns and B = 0: exactly orthonormal direction.
    let mut w = Tensor::zeros(4, 3);
    for j in 0..3 {
        w.set(j, j, 1.0);
    }
    let layer = AdapterLayer::new(w.clone(), Tensor::zeros(1, 3), AdapterMode::Dora, 2, 4.0, &mut rng(0)).unwrap();
    assert!(gram_regularizer(&[layer]).unwrap() < 1e-12);
    let scaled = AdapterLayer::new(
        w.scale(1.1),
        Tensor::zeros(1, 3),
        AdapterMode::Dora,
        2,
        4.0,
        &mut rng(0),
    )
    .unwrap();
    assert!(gram_regularizer(&[scaled]).unwrap() > 0.0);
    let lora = fresh_layer(1, 4, 3, 2, AdapterMode::Lora);
    assert!(matches!(gram_regularizer(&[lora]), Err(Error::InvalidConfig(_))));
}

fn dora_params(layer: &AdapterLayer) -> Vec<Tensor> {
    vec![layer.magnitude().clone(), layer.b().clone(), layer.a().clone()]
}

fn dora_loss(
    layer: &AdapterLayer,
    x: &Tensor,
    labels: &[usize],
    gamma: f64,
    g: &mut Graph,
    v: &[Var],
) -> bidora::Result<Var> {
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

#[test]
fn dora_forward_and_penalty_gradients_match_finite_differences() {
    for seed in 0..20 {
        let layer = random_layer(seed, 5, 4, 2, AdapterMode::Dora);
        let x = Tensor::randn(7, 5, 1.0, &mut rng(seed + 3));
        let labels: Vec<usize> = (0..7).map(|i| (i * 3 + seed as usize) % 4).collect();
        for gamma in [0.0, 0.05] {
            let err = fd_rel_error(|g, v| dora_loss(&layer, &x, &labels, gamma, g, v), &dora_params(&layer));
            assert!(err < 1e-6, "seed {seed} gamma {gamma}: {err:e}");
        }
    }
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let layers = vec![
        random_layer(1, 4, 3, 2, AdapterMode::Dora),
        random_layer(2, 3, 2, 1, AdapterMode::Lora),
        random_layer(3, 2, 2, 1, AdapterMode::Full),
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("layers.json");
    save_layers(&path, &layers).unwrap();
    assert_eq!(load_layers(&path).unwrap(), layers);
    assert!(matches!(
        load_layers(&dir.path().join("nope.json")),
        Err(Error::MissingArtifact(_))
    ));
    let text = layers_to_json(&layers).unwrap().replace("bidora-adapters", "other");
    assert!(layers_from_json(&text).is_err());
}

#[test]
fn parameter_groups_split_magnitudes_from_directions() {
    let layers = vec![
        random_layer(1, 4, 3, 2, AdapterMode::Dora),
        random_layer(2, 3, 2, 1, AdapterMode::Dora),
    ];
    let upper = ParamGroup::upper(&layers);
    let lower = ParamGroup::lower(&layers);
    assert_eq!(upper.numel(&layers).unwrap(), 3 + 2);
    assert_eq!(lower.numel(&layers).unwrap(), 4 * 2 + 2 * 3 + 3 + 2);
    assert!(upper.members.iter().all(|r| r.kind == ParamKind::Magnitude));
    assert!(lower.members.iter().all(|r| r.kind != ParamKind::Magnitude));
}

proptest! {
    #[test]
    fn positive_magnitude_scaling_scales_output_columns(seed in 0u64..1000, c in 0.1f64..5.0) {
        let layer = random_layer(seed, 4, 3, 2, AdapterMode::Dora);
        let mut scaled = layer.clone();
        scaled.set_param(ParamKind::Magnitude, layer.magnitude().scale(c)).unwrap();
        let x = Tensor::randn(3, 4, 1.0, &mut rng(seed));
        let zero_bias = |l: &AdapterLayer| l.forward(&x).unwrap().sub(&l.base_forward(&Tensor::zeros(3, 4)).unwrap()).unwrap();
        let a = zero_bias(&layer).scale(c);
        let b = zero_bias(&scaled);
        prop_assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn merged_column_norms_equal_magnitudes(seed in 0u64..1000) {
        let layer = random_layer(seed, 5, 3, 2, AdapterMode::Dora);
        let norms = merge_weights(&layer).unwrap().column_norms();
        prop_assert!(norms.max_abs_diff(layer.magnitude()) < 1e-12);
    }
}
