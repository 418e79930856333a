//! Gram orthogonality penalty on direction matrices.

use crate::adapters::{AdapterLayer, AdapterMode, LayerVars};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Records `sum_k ||D_kᵀ D_k - I||_F²` over DoRA layers, where
/// `D_k = W0 + (alpha/r) B A` is the unnormalized direction matrix.
///
/// Non-DoRA layers contribute nothing. Returns `None` if no layer is in DoRA
/// mode.
pub fn gram_penalty_var(g: &mut Graph, layers: &[AdapterLayer], vars: &[LayerVars]) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for (layer, lv) in layers.iter().zip(vars) {
        if layer.mode() != AdapterMode::Dora {
            continue;
        }
        let d = layer.direction_var(g, lv)?;
        let dt = g.transpose(d)?;
        let gram = g.matmul(dt, d)?;
        let eye = g.constant(Tensor::identity(layer.out_dim()))?;
        let diff = g.sub(gram, eye)?;
        let term = g.frobenius_norm_sq(diff)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total)
}

/// Value of the Gram penalty over `layers`, all of which must be DoRA.
pub fn gram_regularizer(layers: &[AdapterLayer]) -> Result<f64> {
    if let Some(layer) = layers.iter().find(|l| l.mode() != AdapterMode::Dora) {
        return Err(Error::InvalidConfig(format!(
            "gram_regularizer requires dora layers, found {:?}",
            layer.mode()
        )));
    }
    let mut g = Graph::new();
    let vars = layers
        .iter()
        .map(|l| l.register(&mut g, false))
        .collect::<Result<Vec<_>>>()?;
    Ok(match gram_penalty_var(&mut g, layers, &vars)? {
        Some(v) => g.value(v).item(),
        None => 0.0,
    })
}
