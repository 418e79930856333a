use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Largest number of non-zero pairs for which the exact null distribution is used.
pub const EXACT_MAX_N: usize = 12;
pub const MIN_PAIRS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs left after dropping zero differences.
    pub n: usize,
    /// Rank sum of positive differences `a - b`.
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`.
    pub statistic: f64,
    /// One-sided p for the alternative "a tends to exceed b".
    pub p_greater: f64,
    /// One-sided p for the alternative "a tends to fall below b".
    pub p_less: f64,
    pub method: PMethod,
}

/// Average ranks of `values` (1-based), doubled so ties stay integral.
fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Average of ranks i+1..=j+1, doubled.
        let doubled = (i + 1 + j + 1) as u64;
        for &idx in &order[i..=j] {
            ranks[idx] = doubled;
        }
        i = j + 1;
    }
    ranks
}

/// Exact one-sided tails `(P(W+ >= w), P(W+ <= w))` over all sign patterns,
/// for doubled ranks and a doubled observed rank sum.
fn exact_tails(ranks: &[u64], plus2: u64) -> (f64, f64) {
    let total2: u64 = ranks.iter().sum();
    // counts[s]: sign patterns whose doubled positive rank sum is s.
    let mut counts = vec![0u64; total2 as usize + 1];
    counts[0] = 1;
    for &r in ranks {
        for s in (r as usize..counts.len()).rev() {
            counts[s] += counts[s - r as usize];
        }
    }
    let all = (1u64 << ranks.len()) as f64;
    let ge: u64 = counts[plus2 as usize..].iter().sum();
    let le: u64 = counts[..=plus2 as usize].iter().sum();
    (ge as f64 / all, le as f64 / all)
}

/// Exact one-sided p-values `(p_greater, p_less)` for non-zero paired
/// differences, without the minimum-pairs requirement of
/// [`wilcoxon_signed_rank`]. Accepts 1 to [`EXACT_MAX_N`] differences.
pub fn exact_signed_rank_p(diffs: &[f64]) -> Result<(f64, f64)> {
    if diffs.is_empty() || diffs.len() > EXACT_MAX_N {
        return Err(Error::InvalidData(format!(
            "{} differences for the exact test",
            diffs.len()
        )));
    }
    if diffs.iter().any(|d| *d == 0.0 || !d.is_finite()) {
        return Err(Error::InvalidData("differences must be non-zero and finite".into()));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let plus2: u64 = ranks.iter().zip(diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    Ok(exact_tails(&ranks, plus2))
}

/// Paired Wilcoxon signed-rank test on `a - b`.
///
/// Zero differences are dropped and ties share average ranks. With at most
/// [`EXACT_MAX_N`] pairs the p-values come from the exact distribution of the
/// positive rank sum over all sign patterns; beyond that a normal
/// approximation with tie and continuity corrections is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidData(format!(
            "paired samples of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired differences".into()));
    }
    if diffs.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let n = diffs.len();
    if n < MIN_PAIRS {
        return Err(Error::TooFewPairs {
            needed: MIN_PAIRS,
            got: n,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let plus2: u64 = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| r)
        .sum();
    let total2: u64 = ranks.iter().sum();
    let w_plus = plus2 as f64 / 2.0;
    let w_minus = (total2 - plus2) as f64 / 2.0;

    let (p_greater, p_less, method) = if n <= EXACT_MAX_N {
        let (ge, le) = exact_tails(&ranks, plus2);
        (ge, le, PMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        if !(var > 0.0) {
            return Err(Error::Degenerate("zero variance of the signed-rank statistic".into()));
        }
        let sd = var.sqrt();
        let upper_tail = |z: f64| 0.5 * erfc(z / std::f64::consts::SQRT_2);
        let p_greater = upper_tail((w_plus - mean - 0.5) / sd);
        let p_less = upper_tail(-(w_plus - mean + 0.5) / sd);
        (p_greater.min(1.0), p_less.min(1.0), PMethod::Normal)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        statistic: w_plus.min(w_minus),
        p_greater,
        p_less,
        method,
    })
}
