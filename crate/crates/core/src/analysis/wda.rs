use serde::{Deserialize, Serialize};

use crate::adapters::AdapterLayer;
use crate::autodiff::{Tensor, DEGENERATE_NORM};
use crate::bilevel::trajectory::WdaEntry;
use crate::error::{Error, Result};

/// One point of the magnitude/direction scatter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WdaPoint {
    pub layer: usize,
    pub step: usize,
    pub delta_d: f64,
    pub delta_m: f64,
}

fn paired_norms(w0: &Tensor, wt: &Tensor) -> Result<(Tensor, Tensor)> {
    if w0.shape() != wt.shape() {
        return Err(Error::ShapeMismatch {
            op: "weight decomposition",
            lhs: w0.shape(),
            rhs: wt.shape(),
        });
    }
    if w0.is_empty() {
        return Err(Error::InvalidData("empty weight matrix".into()));
    }
    let (n0, nt) = (w0.column_norms(), wt.column_norms());
    for norms in [&n0, &nt] {
        if let Some((column, &norm)) = norms.data().iter().enumerate().find(|(_, &n)| n < DEGENERATE_NORM) {
            return Err(Error::DegenerateColumn { column, norm });
        }
    }
    Ok((n0, nt))
}

/// Mean over columns of `| ||Wt[:, j]|| - ||W0[:, j]|| |`.
pub fn delta_magnitude(w0: &Tensor, wt: &Tensor) -> Result<f64> {
    let (n0, nt) = paired_norms(w0, wt)?;
    let k = n0.len() as f64;
    Ok(n0.data().iter().zip(nt.data()).map(|(a, b)| (b - a).abs()).sum::<f64>() / k)
}

/// Mean over columns of `1 - cos(Wt[:, j], W0[:, j])`.
pub fn delta_direction(w0: &Tensor, wt: &Tensor) -> Result<f64> {
    let (n0, nt) = paired_norms(w0, wt)?;
    let (rows, k) = w0.shape();
    let mut total = 0.0;
    for j in 0..k {
        let dot: f64 = (0..rows).map(|i| w0.get(i, j) * wt.get(i, j)).sum();
        let cos = (dot / (n0.data()[j] * nt.data()[j])).clamp(-1.0, 1.0);
        total += 1.0 - cos;
    }
    Ok(total / k as f64)
}

/// Change of a layer's merged weight relative to its frozen base.
pub fn layer_wda(index: usize, layer: &AdapterLayer) -> Result<WdaEntry> {
    let merged = layer.merge_weights()?;
    Ok(WdaEntry {
        layer: index,
        delta_m: delta_magnitude(layer.base(), &merged)?,
        delta_d: delta_direction(layer.base(), &merged)?,
    })
}

pub fn model_wda(layers: &[AdapterLayer]) -> Result<Vec<WdaEntry>> {
    layers.iter().enumerate().map(|(i, l)| layer_wda(i, l)).collect()
}

/// Least-squares slope of `delta_m` on `delta_d`, with intercept, pooled over
/// all points.
pub fn correlation_slope(points: &[WdaPoint]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Degenerate(format!(
            "slope needs at least 2 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.delta_d).sum::<f64>() / n;
    let my = points.iter().map(|p| p.delta_m).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.delta_d - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.delta_d - mx) * (p.delta_m - my)).sum();
    let scale: f64 = points
        .iter()
        .map(|p| p.delta_d * p.delta_d)
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    if sxx <= 1e-24 * scale {
        return Err(Error::Degenerate("direction changes have zero variance".into()));
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(xy: &[(f64, f64)]) -> Vec<WdaPoint> {
        xy.iter()
            .map(|&(x, y)| WdaPoint {
                layer: 0,
                step: 0,
                delta_d: x,
                delta_m: y,
            })
            .collect()
    }

    #[test]
    fn identities() {
        let w0 = Tensor::identity(3);
        assert_eq!(delta_magnitude(&w0, &w0).unwrap(), 0.0);
        assert_eq!(delta_direction(&w0, &w0).unwrap(), 0.0);
        assert_eq!(delta_magnitude(&w0, &w0.scale(2.0)).unwrap(), 1.0);
        assert_eq!(delta_direction(&w0, &w0.scale(2.0)).unwrap(), 0.0);
        assert_eq!(delta_direction(&w0, &w0.scale(-1.0)).unwrap(), 2.0);
        let rotated = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(delta_direction(&Tensor::identity(2), &rotated).unwrap(), 1.0);
    }

    #[test]
    fn slope_cases() {
        assert_eq!(
            correlation_slope(&pts(&[(0.0, 0.0), (1.0, 2.0), (2.0, 4.0)])).unwrap(),
            2.0
        );
        assert!(correlation_slope(&pts(&[(0.5, 0.0), (0.5, 2.0)])).is_err());
        assert!(correlation_slope(&pts(&[(0.5, 0.0)])).is_err());
    }

    #[test]
    fn degenerate_and_mismatched_inputs() {
        assert!(matches!(
            delta_magnitude(&Tensor::zeros(2, 2), &Tensor::identity(2)),
            Err(Error::DegenerateColumn { .. })
        ));
        assert!(delta_direction(&Tensor::identity(2), &Tensor::identity(3)).is_err());
    }
}
