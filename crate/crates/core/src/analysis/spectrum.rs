use nalgebra::{DMatrix, SymmetricEigen};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Descending eigenvalues of `Dᵀ D` divided by the largest, truncated to
/// `top_n`. Round-off negatives are clamped to zero.
pub fn eigenspectrum(direction: &Tensor, top_n: usize) -> Result<Vec<f64>> {
    if direction.is_empty() {
        return Err(Error::InvalidData("empty direction matrix".into()));
    }
    if top_n == 0 {
        return Err(Error::InvalidConfig("top_n must be at least 1".into()));
    }
    let gram = direction.transpose().matmul(direction)?;
    let k = gram.rows();
    let m = DMatrix::from_row_slice(k, k, gram.data());
    let mut values: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    let largest = values[0];
    if !(largest > 0.0) || !largest.is_finite() {
        return Err(Error::Degenerate("direction matrix has rank zero".into()));
    }
    values.truncate(top_n);
    Ok(values.into_iter().map(|v| v / largest).collect())
}

/// Mean absolute deviation of a normalized spectrum from the all-ones ideal.
pub fn spectrum_deviation(spectrum: &[f64]) -> f64 {
    if spectrum.is_empty() {
        return 0.0;
    }
    spectrum.iter().map(|v| (1.0 - v).abs()).sum::<f64>() / spectrum.len() as f64
}
