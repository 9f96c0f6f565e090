//! Scoring forecasts and weight rules.
//!
//! * [`regret`]: MSFE (closed form and empirical), regret and minimax-regret scans.
//! * [`scoring`]: out-of-sample scoring of forecast records against a panel.
//! * [`summary`]: quantiles, Crow-Siddiqui kurtosis, Gini and kernel densities.
//!
//! Monte Carlo quantities carry a standard error computed by batch means;
//! see [`McEstimate`].

pub mod regret;
pub mod scoring;
pub mod summary;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use regret::{
    minimax_regret_scan, msfe_closed_form, msfe_empirical, regret, MethodCurve, RegretPoint, RegretReport, ScanConfig,
    ThetaGrid, ThetaPoint,
};
pub use scoring::{delta_sfe, group_msfe, next_period_realizations, score_records, unit_msfe, ScoredForecast};
pub use summary::{crow_siddiqui, crow_siddiqui_from_quantile, gini, kde, kde_density, quantile, silverman_bandwidth, KdeCurve};

/// Number of batches used for batch-means standard errors.
pub const BATCHES: usize = 20;

/// Pairwise (cascade) summation; rounding error grows with `log n`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 128;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn pairwise_mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// A Monte Carlo point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl McEstimate {
    /// A known value with no sampling error.
    pub fn exact(value: f64) -> Self {
        Self { mean: value, se: 0.0, n: 0 }
    }

    /// Sample mean with a batch-means standard error.
    pub fn from_samples(values: &[f64]) -> Self {
        let mean = pairwise_mean(values);
        let se = batch_se(values.len(), |r| pairwise_mean(&values[r]));
        Self { mean, se, n: values.len() }
    }

    /// `estimate` computed on the full sample, with a standard error from
    /// recomputing `statistic` on contiguous batches.
    pub fn batched(n: usize, estimate: f64, statistic: impl Fn(Range<usize>) -> f64) -> Self {
        Self {
            mean: estimate,
            se: batch_se(n, statistic),
            n,
        }
    }

    /// Number of standard errors separating `self` from `other` (positive when `self` is larger),
    /// treating the two as independent.
    pub fn z_versus(&self, other: &McEstimate) -> f64 {
        (self.mean - other.mean) / (self.se * self.se + other.se * other.se).sqrt()
    }
}

/// Contiguous, near-equal batch ranges covering `0..n`.
pub fn batch_ranges(n: usize, batches: usize) -> Vec<Range<usize>> {
    (0..batches)
        .map(|b| (b * n / batches)..((b + 1) * n / batches))
        .filter(|r| !r.is_empty())
        .collect()
}

fn batch_se(n: usize, statistic: impl Fn(Range<usize>) -> f64) -> f64 {
    if n < 2 * BATCHES {
        return f64::NAN;
    }
    let stats: Vec<f64> = batch_ranges(n, BATCHES).into_iter().map(statistic).collect();
    batch_means_se(&stats)
}

/// Standard error of the average of per-batch statistics.
pub(crate) fn batch_means_se(stats: &[f64]) -> f64 {
    let m = stats.len() as f64;
    let mean = stats.iter().sum::<f64>() / m;
    let var = stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (var / m).sqrt()
}

/// Sample covariance (divisor n-1) of `(A - μ)²` and `(1 - W)²` pairs.
///
/// Negative values mean the weight moves toward the time-series forecast
/// exactly when the unit's effect is far from μ.
pub fn assumption2_cov(draws: &[(f64, f64)]) -> Result<f64> {
    if draws.len() < 2 {
        return Err(Error::domain(format!("covariance needs at least 2 draws, got {}", draws.len())));
    }
    Ok(covariance(draws))
}

pub(crate) fn covariance(draws: &[(f64, f64)]) -> f64 {
    let n = draws.len() as f64;
    let constant = |f: fn(&(f64, f64)) -> f64| draws.iter().all(|d| f(d) == f(&draws[0]));
    if constant(|d| d.0) || constant(|d| d.1) {
        return 0.0;
    }
    let xs: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let ys: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let (mx, my) = (pairwise_mean(&xs), pairwise_mean(&ys));
    let prods: Vec<f64> = draws.iter().map(|(x, y)| (x - mx) * (y - my)).collect();
    pairwise_sum(&prods) / (n - 1.0)
}

/// [`assumption2_cov`] with a batch-means standard error.
pub fn assumption2_cov_estimate(draws: &[(f64, f64)]) -> Result<McEstimate> {
    let full = assumption2_cov(draws)?;
    Ok(McEstimate::batched(draws.len(), full, |r| covariance(&draws[r])))
}

/// Conditional MSFE of the IW forecast given the conditional moments
/// `γ²` (TS error variance), `κ²` (Pool error variance) and `δ` (their cross term).
pub fn conditional_msfe(sigma2: f64, gamma2: f64, kappa2: f64, delta: f64, w: f64) -> f64 {
    sigma2 + gamma2 * w * w + kappa2 * (1.0 - w) * (1.0 - w) - 2.0 * delta * w * (1.0 - w)
}

/// Weight minimizing [`conditional_msfe`]: `(κ² + δ) / (κ² + γ² + 2δ)`.
pub fn conditional_optimal_weight(gamma2: f64, kappa2: f64, delta: f64) -> Result<f64> {
    let den = kappa2 + gamma2 + 2.0 * delta;
    if !(den > 0.0) {
        return Err(Error::domain(format!("conditional MSFE is not strictly convex in w (κ² + γ² + 2δ = {den})")));
    }
    Ok(((kappa2 + delta) / den).clamp(0.0, 1.0))
}
