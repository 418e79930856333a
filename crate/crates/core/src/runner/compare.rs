use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{wilcoxon_signed_rank, WilcoxonResult};
use crate::error::{Error, Result};
use crate::runner::analyze::method_label;
use crate::runner::run::{cmd_train, read_metrics, METRICS_FILE};
use crate::runner::spec::ExperimentSpec;
use crate::runner::sweep::write_csv;

pub const COMPARE_FILE: &str = "compare.csv";
pub const COMPARE_REPORT_FILE: &str = "compare.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub seed: u64,
    pub test_a: f64,
    pub test_b: f64,
    pub gap_a: f64,
    pub gap_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub method_a: String,
    pub method_b: String,
    pub rows: Vec<CompareRow>,
    pub mean_test_a: f64,
    pub mean_test_b: f64,
    pub mean_gap_a: f64,
    pub mean_gap_b: f64,
    /// Signed-rank test on `gap_b - gap_a`; `p_greater` is the one-sided p
    /// that `b` overfits more than `a`.
    pub wilcoxon: Option<WilcoxonResult>,
    pub error: Option<String>,
}

impl CompareReport {
    pub fn from_rows(method_a: String, method_b: String, rows: Vec<CompareRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&CompareRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let gap_a: Vec<f64> = rows.iter().map(|r| r.gap_a).collect();
        let gap_b: Vec<f64> = rows.iter().map(|r| r.gap_b).collect();
        let test = wilcoxon_signed_rank(&gap_b, &gap_a);
        Self {
            method_a,
            method_b,
            mean_test_a: mean(|r| r.test_a),
            mean_test_b: mean(|r| r.test_b),
            mean_gap_a: mean(|r| r.gap_a),
            mean_gap_b: mean(|r| r.gap_b),
            error: test.as_ref().err().map(|e| e.to_string()),
            wilcoxon: test.ok(),
            rows,
        }
    }

    pub fn p_value(&self) -> Option<f64> {
        self.wilcoxon.as_ref().map(|w| w.p_greater)
    }
}

/// Trains both specs over their shared seeds and compares per-seed test
/// metrics and overfitting gaps. Tables go to `out`. A failing test (for
/// example identical runs) is recorded in the report instead of aborting.
pub fn cmd_compare(a: &ExperimentSpec, b: &ExperimentSpec, out: &Path) -> Result<CompareReport> {
    if a.seeds != b.seeds {
        return Err(Error::InvalidConfig(format!(
            "seed lists differ: {:?} vs {:?}",
            a.seeds, b.seeds
        )));
    }
    if a.task != b.task {
        return Err(Error::InvalidConfig("the two specs describe different tasks".into()));
    }
    let runs_a = cmd_train(a)?;
    let runs_b = cmd_train(b)?;
    let mut rows = Vec::with_capacity(runs_a.len());
    for (da, db) in runs_a.iter().zip(&runs_b) {
        let ma = read_metrics(&da.join(METRICS_FILE))?;
        let mb = read_metrics(&db.join(METRICS_FILE))?;
        rows.push(CompareRow {
            seed: ma.seed,
            test_a: ma.test_metric,
            test_b: mb.test_metric,
            gap_a: ma.gap.gap,
            gap_b: mb.gap.gap,
        });
    }
    let report = CompareReport::from_rows(
        method_label(a.method, a.train.mode),
        method_label(b.method, b.train.mode),
        rows,
    );
    write_csv(&out.join(COMPARE_FILE), &report.rows)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(out.join(COMPARE_REPORT_FILE), text)?;
    Ok(report)
}
