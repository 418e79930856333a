use serde::{Deserialize, Serialize};

use crate::bilevel::trajectory::TrajectoryLog;
use crate::error::{Error, Result};

pub const EMA_DECAY: f64 = 0.99;

/// `decay * prev + (1 - decay) * value`.
pub fn ema_update(prev: f64, value: f64, decay: f64) -> f64 {
    decay * prev + (1.0 - decay) * value
}

/// Exponential moving average of `series`, started at its first value.
pub fn ema(series: &[f64], decay: f64) -> Option<f64> {
    let (&first, rest) = series.split_first()?;
    Some(rest.iter().fold(first, |acc, &v| ema_update(acc, v, decay)))
}

/// Weights of the inner (training-split) and outer (validation-split) batch
/// metrics in a bi-level run's smoothed training metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapWeights {
    pub inner: f64,
    pub outer: f64,
}

impl Default for GapWeights {
    fn default() -> Self {
        Self { inner: 0.8, outer: 0.2 }
    }
}

impl GapWeights {
    pub fn combine(&self, inner: f64, outer: f64) -> f64 {
        self.inner * inner + self.outer * outer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// Smoothed training metric (combined for bi-level runs).
    pub train_metric: f64,
    pub test_metric: f64,
    /// `train_metric - test_metric`.
    pub gap: f64,
    /// Smoothed inner metric, for bi-level runs.
    pub inner: Option<f64>,
    /// Smoothed outer metric, for bi-level runs.
    pub outer: Option<f64>,
    pub weights: Option<GapWeights>,
}

/// Smoothed train metric minus test metric. A log with upper-level records is
/// treated as a bi-level run and its inner and outer averages are combined
/// with `weights`.
pub fn gap_report(log: &TrajectoryLog, test_metric: f64, weights: GapWeights) -> Result<GapReport> {
    let inner = ema(&log.train_metrics(), EMA_DECAY)
        .ok_or_else(|| Error::InvalidData("trajectory has no training records".into()))?;
    let outer = ema(&log.upper_metrics(), EMA_DECAY);
    let (train_metric, weights) = match outer {
        Some(o) => (weights.combine(inner, o), Some(weights)),
        None => (inner, None),
    };
    Ok(GapReport {
        train_metric,
        test_metric,
        gap: train_metric - test_metric,
        inner: outer.map(|_| inner),
        outer,
        weights,
    })
}
