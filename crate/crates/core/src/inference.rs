//! Posterior summaries: credible intervals, tail probabilities against zero,
//! Benjamini–Hochberg adjustment and the between-virus covariance report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cell_index, CountPanel, HyperParams, ProximitySpec, MONTHS};
use crate::sampler::{run_chains, ChainConfig, PosteriorSamples};

/// Linearly interpolated quantile of sorted data (the "type 7" rule).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Equal-tailed interval at probabilities `(1 − level)/2` and `(1 + level)/2`.
///
/// ```
/// let values: Vec<f64> = (1..=100).map(f64::from).collect();
/// let (lo, hi) = mcar::inference::posterior_interval(&values, 0.95)?;
/// assert!((lo - 3.475).abs() < 1e-12 && (hi - 97.525).abs() < 1e-12);
/// # Ok::<(), mcar::Error>(())
/// ```
pub fn posterior_interval(values: &[f64], level: f64) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::TooFewDraws { needed: 2, have: values.len() });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("interval level must lie in (0, 1), got {level}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&sorted, tail), quantile_sorted(&sorted, 1.0 - tail)))
}

/// Two-sided posterior tail probability of zero: `2 · min(#{x > 0}, #{x < 0}) / n`,
/// floored at `1/n` and capped at 1. Exact zeros count toward neither tail;
/// a sample of nothing but zeros has `p = 1`.
pub fn posterior_p_zero(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let above = values.iter().filter(|&&x| x > 0.0).count();
    let below = values.iter().filter(|&&x| x < 0.0).count();
    if above + below == 0 {
        return 1.0;
    }
    (2.0 * above.min(below) as f64 / n).clamp(1.0 / n, 1.0)
}

/// `p · m / rank`, exact at `rank = m` so no value is rounded below its input.
fn step_up(p: f64, m: usize, rank: usize) -> f64 {
    if rank == m {
        p
    } else {
        p * m as f64 / rank as f64
    }
}

/// Benjamini–Hochberg step-up adjusted p-values, in input order.
///
/// ```
/// let q = mcar::inference::bh_adjust(&[0.005, 0.9]);
/// assert_eq!(q, vec![0.01, 0.9]);
/// ```
pub fn bh_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = f64::INFINITY;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(step_up(p[i], m, rank + 1));
        adjusted[i] = running.min(1.0);
    }
    adjusted
}

/// Summary of one off-diagonal entry of the between-virus covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    /// 1-based virus indices, `virus_a < virus_b`.
    pub virus_a: usize,
    pub virus_b: usize,
    pub posterior_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub level: f64,
    pub fdr_level: f64,
    pub pairs: Vec<PairSummary>,
}

impl CovarianceReport {
    pub fn significant_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().filter(|p| p.significant).map(|p| (p.virus_a, p.virus_b)).collect()
    }

    pub fn pair(&self, a: usize, b: usize) -> Option<&PairSummary> {
        let (a, b) = (a.min(b), a.max(b));
        self.pairs.iter().find(|p| p.virus_a == a && p.virus_b == b)
    }
}

/// Interval, tail probability and FDR-adjusted significance for every
/// off-diagonal covariance entry, adjusted jointly over all pairs.
pub fn covariance_report(samples: &PosteriorSamples, level: f64, fdr: f64) -> Result<CovarianceReport> {
    if samples.draws.is_empty() {
        return Err(Error::TooFewDraws { needed: 1, have: 0 });
    }
    if !(fdr > 0.0 && fdr < 1.0) {
        return Err(Error::Config(format!("FDR level must lie in (0, 1), got {fdr}")));
    }
    let v_count = samples.viruses;
    let pairs: Vec<(usize, usize)> = (0..v_count).flat_map(|a| (a + 1..v_count).map(move |b| (a, b))).collect();
    let mut columns = vec![Vec::with_capacity(samples.draws.len()); pairs.len()];
    for state in samples.states() {
        let cov = state.covariance();
        for (col, &(a, b)) in columns.iter_mut().zip(&pairs) {
            col.push(cov[(a, b)]);
        }
    }
    let p_raw: Vec<f64> = columns.iter().map(|c| posterior_p_zero(c)).collect();
    let p_adjusted = bh_adjust(&p_raw);
    let mut out = Vec::with_capacity(pairs.len());
    for (k, &(a, b)) in pairs.iter().enumerate() {
        let col = &columns[k];
        let (ci_low, ci_high) = if col.len() >= 2 { posterior_interval(col, level)? } else { (col[0], col[0]) };
        out.push(PairSummary {
            virus_a: a + 1,
            virus_b: b + 1,
            posterior_mean: col.iter().sum::<f64>() / col.len() as f64,
            ci_low,
            ci_high,
            p_raw: p_raw[k],
            p_adjusted: p_adjusted[k],
            significant: p_adjusted[k] < fdr,
        });
    }
    Ok(CovarianceReport { level, fdr_level: fdr, pairs: out })
}

/// Posterior summary of `exp(α_v + φ_mtv)` for one cell (1-based indices).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeRiskSummary {
    pub month: usize,
    pub year: usize,
    pub virus: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn relative_risk_summary(samples: &PosteriorSamples, level: f64) -> Result<Vec<RelativeRiskSummary>> {
    if samples.draws.is_empty() {
        return Err(Error::TooFewDraws { needed: 1, have: 0 });
    }
    let v_count = samples.viruses;
    let n_cells = MONTHS * samples.years * v_count;
    let mut columns = vec![Vec::with_capacity(samples.draws.len()); n_cells];
    for state in samples.states() {
        for (i, col) in columns.iter_mut().enumerate() {
            col.push((state.alpha[i % v_count] + state.phi[i]).exp());
        }
    }
    let mut out = Vec::with_capacity(n_cells);
    for t in 0..samples.years {
        for m in 0..MONTHS {
            for v in 0..v_count {
                let col = &columns[cell_index(m, t, v, v_count)];
                let (ci_low, ci_high) = if col.len() >= 2 { posterior_interval(col, level)? } else { (col[0], col[0]) };
                out.push(RelativeRiskSummary {
                    month: m + 1,
                    year: t + 1,
                    virus: v + 1,
                    mean: col.iter().sum::<f64>() / col.len() as f64,
                    ci_low,
                    ci_high,
                });
            }
        }
    }
    Ok(out)
}

/// Covariance report from a fit on the first `years` years of data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YearCut {
    pub years: usize,
    pub report: CovarianceReport,
}

/// Refits the model on years `1..=k` for each `k` in `cuts` and reports the
/// covariance pairs of each fit, with FDR adjustment done per cut.
pub fn rolling_year_reports(
    panel: &CountPanel,
    spec: &ProximitySpec,
    hyper: &HyperParams,
    config: &ChainConfig,
    cuts: &[usize],
    level: f64,
    fdr: f64,
) -> Result<Vec<YearCut>> {
    cuts.par_iter()
        .map(|&k| {
            let truncated = panel.truncate_years(k)?;
            let samples = run_chains(&truncated, spec, hyper, config)?;
            Ok(YearCut { years: k, report: covariance_report(&samples, level, fdr)? })
        })
        .collect()
}
