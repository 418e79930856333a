use std::path::{Path, PathBuf};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runner::run::{cmd_train, read_metrics, METRICS_FILE};
use crate::runner::spec::{ExperimentSpec, Method};

pub const DEFAULT_RATIOS: [f64; 5] = [0.6, 0.7, 0.8, 0.9, 1.0];
pub const SWEEP_FILE: &str = "partition.csv";
pub const SWEEP_SUMMARY_FILE: &str = "partition_summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub seed: u64,
    pub initial_test_metric: f64,
    pub test_metric: f64,
    pub search_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub ratio: f64,
    pub seeds: usize,
    pub mean_test_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummaryRow>,
    /// Directory holding the CSV tables and per-ratio run directories.
    pub dir: PathBuf,
}

impl SweepTable {
    pub fn mean_for(&self, ratio: f64) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.ratio == ratio)
            .map(|r| r.mean_test_metric)
    }
}

fn ratio_label(ratio: f64) -> String {
    format!("ratio-{ratio}")
}

/// Trains `spec` (which must be bidora) once per ratio and seed. Runs land in
/// `<out>/sweep/ratio-<r>/...`; the per-run and per-ratio tables are written
/// next to them. Ratios run on separate threads.
pub fn cmd_sweep_partition(spec: &ExperimentSpec, ratios: &[f64]) -> Result<SweepTable> {
    spec.validate()?;
    if spec.method != Method::Bidora {
        return Err(Error::InvalidConfig(
            "the partition sweep applies to bidora only".into(),
        ));
    }
    if ratios.is_empty() || ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::InvalidConfig(
            "sweep ratios must be a non-empty subset of (0, 1]".into(),
        ));
    }
    let dir = spec.out.join("sweep");
    let specs: Vec<ExperimentSpec> = ratios
        .iter()
        .map(|&r| {
            let mut s = spec.clone();
            s.train.split_ratio = r;
            s.out = dir.join(ratio_label(r));
            s
        })
        .collect();
    let results: Vec<Result<Vec<PathBuf>>> = thread::scope(|scope| {
        let handles: Vec<_> = specs.iter().map(|s| scope.spawn(move || cmd_train(s))).collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::InvalidData("sweep worker panicked".into())))
            })
            .collect()
    });

    let mut rows = Vec::new();
    for (&ratio, result) in ratios.iter().zip(results) {
        for run in result? {
            let m = read_metrics(&run.join(METRICS_FILE))?;
            rows.push(SweepRow {
                ratio,
                seed: m.seed,
                initial_test_metric: m.initial_test_metric,
                test_metric: m.test_metric,
                search_iterations: m.search.map_or(0, |s| s.iterations),
            });
        }
    }
    let summary = summarize(ratios, &rows);
    write_csv(&dir.join(SWEEP_FILE), &rows)?;
    write_csv(&dir.join(SWEEP_SUMMARY_FILE), &summary)?;
    Ok(SweepTable { rows, summary, dir })
}

fn summarize(ratios: &[f64], rows: &[SweepRow]) -> Vec<SweepSummaryRow> {
    ratios
        .iter()
        .map(|&ratio| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.ratio == ratio)
                .map(|r| r.test_metric)
                .collect();
            SweepSummaryRow {
                ratio,
                seeds: vals.len(),
                mean_test_metric: vals.iter().sum::<f64>() / vals.len().max(1) as f64,
            }
        })
        .collect()
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}
