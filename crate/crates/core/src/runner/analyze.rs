use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{load_layers, AdapterMode};
use crate::analysis::{
    correlation_slope, eigenspectrum, gap_report, model_wda, wilcoxon_signed_rank, GapWeights, WdaPoint, WilcoxonResult,
};
use crate::bilevel::{Mode, TrajectoryLog};
use crate::error::{Error, Result};
use crate::runner::run::{read_metrics, RunMetrics, CHECKPOINT_DIR, METRICS_FILE, TRAJECTORY_FILE};
use crate::runner::spec::{Method, TaskFamily};
use crate::runner::sweep::write_csv;

pub const WDA_FILE: &str = "wda.csv";
pub const SLOPE_FILE: &str = "slopes.csv";
pub const SPECTRA_FILE: &str = "spectra.csv";
pub const GAP_FILE: &str = "gap.csv";
pub const REPORT_FILE: &str = "report.json";
/// Eigenvalues kept per layer.
pub const SPECTRUM_TOP_N: usize = 64;

/// Checkpoint labels used for slope fitting: the planned fractions of the
/// step budget. `init` and `final` are emitted but not fitted.
pub fn fitted_label(label: &str) -> bool {
    label.starts_with('p')
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WdaRow {
    pub run: String,
    pub method: String,
    pub seed: u64,
    pub layer: usize,
    pub step: usize,
    pub label: String,
    pub delta_d: f64,
    pub delta_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeRow {
    pub method: String,
    pub points: usize,
    pub slope: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub run: String,
    pub method: String,
    pub seed: u64,
    pub layer: usize,
    pub rank: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub run: String,
    pub method: String,
    pub task: TaskFamily,
    pub seed: u64,
    pub train_metric: f64,
    pub test_metric: f64,
    pub gap: f64,
}

/// Paired comparison of overfitting gaps against the baseline runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapComparison {
    pub pairs: usize,
    pub mean_gap: f64,
    pub mean_gap_baseline: f64,
    /// Signed-rank test on `baseline gap - gap`; `p_greater` is the one-sided
    /// p that the baseline gaps are larger.
    pub wilcoxon: Option<WilcoxonResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub runs: usize,
    pub baseline_runs: usize,
    pub slopes: Vec<SlopeRow>,
    pub comparison: Option<GapComparison>,
    /// Problems that did not stop the analysis.
    pub errors: Vec<String>,
    pub files: Vec<String>,
}

impl AnalysisReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

struct LoadedRun {
    name: String,
    dir: PathBuf,
    metrics: RunMetrics,
    log: TrajectoryLog,
}

pub fn method_label(method: Method, mode: Mode) -> String {
    match mode {
        Mode::Full => method.name().to_string(),
        m => format!("{}-{}", method.name(), m.name()),
    }
}

/// Run directories under `path`: the path itself when it holds a metrics
/// file, otherwise its immediate and second-level subdirectories that do.
pub fn discover_runs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.join(METRICS_FILE).exists() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(Error::MissingArtifact(path.join(METRICS_FILE)));
    }
    let mut found = Vec::new();
    let mut children: Vec<PathBuf> = fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    children.sort();
    for child in children.into_iter().filter(|c| c.is_dir()) {
        if child.join(METRICS_FILE).exists() {
            found.push(child);
            continue;
        }
        let mut grand: Vec<PathBuf> = fs::read_dir(&child)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(METRICS_FILE).exists())
            .collect();
        grand.sort();
        found.extend(grand);
    }
    if found.is_empty() {
        return Err(Error::MissingArtifact(path.join(METRICS_FILE)));
    }
    Ok(found)
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let metrics = read_metrics(&dir.join(METRICS_FILE))?;
    let log = TrajectoryLog::read(&dir.join(TRAJECTORY_FILE))?;
    Ok(LoadedRun {
        name: dir.display().to_string(),
        dir: dir.to_path_buf(),
        metrics,
        log,
    })
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<LoadedRun>> {
    let mut runs = Vec::new();
    for p in paths {
        for dir in discover_runs(p)? {
            runs.push(load_run(&dir)?);
        }
    }
    Ok(runs)
}

/// Scatter points recomputed from every checkpoint file the log refers to.
fn wda_rows(run: &LoadedRun) -> Result<Vec<WdaRow>> {
    let mut rows = Vec::new();
    let method = method_label(run.metrics.method, run.metrics.mode);
    for (record, label, _) in run.log.checkpoints() {
        let path = run.dir.join(CHECKPOINT_DIR).join(format!("{label}.json"));
        let layers = load_layers(&path)?;
        for entry in model_wda(&layers)? {
            rows.push(WdaRow {
                run: run.name.clone(),
                method: method.clone(),
                seed: run.metrics.seed,
                layer: entry.layer,
                step: record.step,
                label: label.to_string(),
                delta_d: entry.delta_d,
                delta_m: entry.delta_m,
            });
        }
    }
    Ok(rows)
}

/// Pooled slope per method over the fitted checkpoint rows of `rows`.
pub fn slopes_from_rows(rows: &[WdaRow]) -> Vec<SlopeRow> {
    let mut by_method: BTreeMap<&str, Vec<WdaPoint>> = BTreeMap::new();
    for r in rows.iter().filter(|r| fitted_label(&r.label)) {
        by_method.entry(r.method.as_str()).or_default().push(WdaPoint {
            layer: r.layer,
            step: r.step,
            delta_d: r.delta_d,
            delta_m: r.delta_m,
        });
    }
    by_method
        .into_iter()
        .map(|(method, points)| {
            let fit = correlation_slope(&points);
            SlopeRow {
                method: method.to_string(),
                points: points.len(),
                slope: fit.as_ref().ok().copied(),
                error: fit.err().map(|e| e.to_string()),
            }
        })
        .collect()
}

fn spectrum_rows(run: &LoadedRun) -> Result<Vec<SpectrumRow>> {
    let path = run.dir.join(CHECKPOINT_DIR).join("final.json");
    let layers = load_layers(&path)?;
    let method = method_label(run.metrics.method, run.metrics.mode);
    let mut rows = Vec::new();
    for (i, layer) in layers.iter().enumerate().filter(|(_, l)| l.mode() == AdapterMode::Dora) {
        let spectrum =
            eigenspectrum(&layer.direction_matrix()?, SPECTRUM_TOP_N).map_err(|e| e.at(format!("layer {i}")))?;
        rows.extend(spectrum.into_iter().enumerate().map(|(rank, value)| SpectrumRow {
            run: run.name.clone(),
            method: method.clone(),
            seed: run.metrics.seed,
            layer: i,
            rank: rank + 1,
            value,
        }));
    }
    Ok(rows)
}

fn gap_row(run: &LoadedRun) -> GapRow {
    // Recomputed from the log; runs without training records keep the stored report.
    let gap = gap_report(&run.log, run.metrics.test_metric, GapWeights::default())
        .unwrap_or_else(|_| run.metrics.gap.clone());
    GapRow {
        run: run.name.clone(),
        method: method_label(run.metrics.method, run.metrics.mode),
        task: run.metrics.task,
        seed: run.metrics.seed,
        train_metric: gap.train_metric,
        test_metric: gap.test_metric,
        gap: gap.gap,
    }
}

/// Gaps of `runs` and `baseline` paired by task and seed.
fn compare_gaps(runs: &[GapRow], baseline: &[GapRow]) -> Result<GapComparison> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for r in runs {
        if let Some(base) = baseline.iter().find(|x| x.task == r.task && x.seed == r.seed) {
            a.push(r.gap);
            b.push(base.gap);
        }
    }
    if a.is_empty() {
        return Err(Error::InvalidData(
            "no (task, seed) pairs shared with the baseline runs".into(),
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let test = wilcoxon_signed_rank(&b, &a);
    Ok(GapComparison {
        pairs: a.len(),
        mean_gap: mean(&a),
        mean_gap_baseline: mean(&b),
        error: test.as_ref().err().map(|e| e.to_string()),
        wilcoxon: test.ok(),
    })
}

/// Reads run directories (or parents of them), writes the WDA scatter,
/// per-method slopes, final-checkpoint spectra, gap table, and a JSON report
/// into `out`. With `baseline` runs, gaps are compared pairwise by seed.
///
/// Missing artifacts abort; statistical failures are collected in the report.
pub fn cmd_analyze(runs: &[PathBuf], baseline: &[PathBuf], out: &Path) -> Result<AnalysisReport> {
    if runs.is_empty() {
        return Err(Error::InvalidConfig("no run directories given".into()));
    }
    let primary = load_all(runs)?;
    let base = load_all(baseline)?;
    let mut errors = Vec::new();

    let mut wda = Vec::new();
    let mut spectra = Vec::new();
    for run in primary.iter().chain(&base) {
        wda.extend(wda_rows(run)?);
        match spectrum_rows(run) {
            Ok(rows) => spectra.extend(rows),
            Err(e @ Error::MissingArtifact(_)) => return Err(e),
            Err(e) => errors.push(format!("spectrum of {}: {e}", run.name)),
        }
    }
    let slopes = slopes_from_rows(&wda);
    errors.extend(
        slopes
            .iter()
            .filter_map(|s| s.error.as_ref().map(|e| format!("slope of {}: {e}", s.method))),
    );
    let gaps: Vec<GapRow> = primary.iter().map(gap_row).collect();
    let base_gaps: Vec<GapRow> = base.iter().map(gap_row).collect();
    let comparison = if base.is_empty() {
        None
    } else {
        let c = compare_gaps(&gaps, &base_gaps)?;
        if let Some(e) = &c.error {
            errors.push(format!("gap comparison: {e}"));
        }
        Some(c)
    };

    fs::create_dir_all(out)?;
    let all_gaps: Vec<GapRow> = gaps.into_iter().chain(base_gaps).collect();
    write_csv(&out.join(WDA_FILE), &wda)?;
    write_csv(&out.join(SLOPE_FILE), &slopes)?;
    write_csv(&out.join(SPECTRA_FILE), &spectra)?;
    write_csv(&out.join(GAP_FILE), &all_gaps)?;
    let report = AnalysisReport {
        runs: primary.len(),
        baseline_runs: base.len(),
        slopes,
        comparison,
        errors,
        files: [WDA_FILE, SLOPE_FILE, SPECTRA_FILE, GAP_FILE, REPORT_FILE]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(out.join(REPORT_FILE), text)?;
    Ok(report)
}
