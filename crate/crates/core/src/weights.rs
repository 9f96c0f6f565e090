//! Individual weight rules.
//!
//! Every rule maps one unit's series to a weight `w ∈ [0, 1]` on the
//! time-series forecast; the pooled forecast receives `1 - w`.
//!
//! Two information timings are supported:
//!
//! * [`Timing::Current`]: the weight uses the whole series `Y_1..Y_T` and
//!   pairs with the time-series mean.
//! * [`Timing::Lagged`]: the weight uses the information set `Y_1..Y_{T-1}`
//!   and pairs with the last observation `Y_T`. The functions here receive
//!   that information set directly, so a lagged call on `[Y_1, Y_2]` is the
//!   weight applied to `Y_3`.
//!
//! When the time-series and pooled forecasts coincide (every value equals μ)
//! the weight is irrelevant and the rules return 0. When only a rule's
//! noise estimate vanishes the estimated signal-to-noise ratio is infinite and
//! the rules return 1.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{PanelDataset, Series};

/// Which information set a weight conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Timing {
    /// Time-T information, TS forecast is the series mean.
    #[default]
    Current,
    /// Time-(T-1) information, TS forecast is the last observation.
    Lagged,
}

impl fmt::Display for Timing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Timing::Current => "current",
            Timing::Lagged => "lagged",
        })
    }
}

/// Output of a weight rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightResult {
    /// Weight on the time-series forecast.
    pub w: f64,
    /// Estimated bound on the conditional signal-to-noise ratio (minimax-regret rules only).
    pub zeta_bound: Option<f64>,
    /// The rule's noise-variance estimate, when it forms one.
    pub sigma2_hat: Option<f64>,
    /// A positive part, clamp or degenerate-input rule determined `w`.
    pub clipped: bool,
}

impl WeightResult {
    fn plain(w: f64, clipped: bool) -> Self {
        Self {
            w,
            zeta_bound: None,
            sigma2_hat: None,
            clipped,
        }
    }
}

fn sum_sq_diffs(values: &[f64]) -> f64 {
    values.windows(2).map(|p| (p[0] - p[1]).powi(2)).sum()
}

fn sum_sq_dev(values: &[f64], center: f64) -> f64 {
    values.iter().map(|v| (v - center).powi(2)).sum()
}

fn max_sq_dev(values: &[f64], center: f64) -> f64 {
    values.iter().map(|v| (v - center).powi(2)).fold(0.0, f64::max)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn all_equal_mu(series: &Series) -> bool {
    series.values.iter().all(|&v| v == series.mu)
}

fn require_len(series: &Series, min: usize, what: &str) -> Result<()> {
    if series.len() < min {
        return Err(Error::domain(format!(
            "{what} needs at least {min} observations, got {}",
            series.len()
        )));
    }
    Ok(())
}

/// Unbiased noise variance from first differences: `Σ(v_t - v_{t+1})² / 2(m-1)`.
pub fn sigma2_hat_diff(values: &[f64]) -> Result<f64> {
    let m = values.len();
    if m < 2 {
        return Err(Error::domain(format!("sigma2_hat_diff needs at least 2 values, got {m}")));
    }
    Ok(sum_sq_diffs(values) / (2.0 * (m - 1) as f64))
}

/// Estimated oracle weight (IW-O) with positive-part guards.
pub fn iw_o_weight(series: &Series, timing: Timing) -> Result<WeightResult> {
    require_len(series, 2, "IW-O")?;
    let y = &series.values;
    let m = y.len() as f64;
    let second_moment = sum_sq_dev(y, series.mu) / m;
    let sigma2 = sum_sq_diffs(y) / (2.0 * (m - 1.0));
    if second_moment == 0.0 {
        return Ok(WeightResult {
            sigma2_hat: Some(sigma2),
            ..WeightResult::plain(0.0, true)
        });
    }
    let raw_num = second_moment - sigma2;
    let num = raw_num.max(0.0);
    let den = match timing {
        // λ² + σ²/T = E[(Y-μ)²] - (T-1)/T σ²
        Timing::Current => second_moment - sum_sq_diffs(y) / (2.0 * m),
        Timing::Lagged => second_moment,
    };
    let mut clipped = raw_num < 0.0;
    let w = if num == 0.0 {
        0.0
    } else if den <= 0.0 {
        clipped = true;
        1.0
    } else {
        let ratio = num / den;
        if ratio > 1.0 {
            clipped = true;
        }
        ratio.clamp(0.0, 1.0)
    };
    Ok(WeightResult {
        sigma2_hat: Some(sigma2),
        ..WeightResult::plain(w, clipped)
    })
}

fn zeta_parts(series: &Series, timing: Timing) -> Result<(f64, f64)> {
    require_len(series, 2, "zeta bound")?;
    let y = &series.values;
    let m = y.len() as f64;
    let num = max_sq_dev(y, series.mu);
    let den = match timing {
        // unbiased for σ²/T
        Timing::Current => sum_sq_diffs(y) / (2.0 * m * (m - 1.0)),
        // unbiased for σ² (TS forecast is a single observation)
        Timing::Lagged => sum_sq_diffs(y) / (2.0 * (m - 1.0)),
    };
    Ok((num, den))
}

fn ratio_or_inf(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Heuristic bound on the conditional signal-to-noise ratio: the largest
/// squared deviation from μ over the noise-variance estimate matching `timing`.
///
/// Returns `+∞` when the noise estimate is 0 but some value differs from μ.
pub fn zeta_bound_hat(series: &Series, timing: Timing) -> Result<f64> {
    let (num, den) = zeta_parts(series, timing)?;
    Ok(ratio_or_inf(num, den))
}

/// Minimax-regret weight for a known bound: `1 - 1/√(ζ̃² + 1)`.
pub fn minimax_weight_from_bound(zeta_bound: f64) -> Result<f64> {
    if zeta_bound.is_nan() || zeta_bound < 0.0 {
        return Err(Error::domain(format!("zeta bound must be >= 0, got {zeta_bound}")));
    }
    if zeta_bound.is_infinite() {
        return Ok(1.0);
    }
    Ok(1.0 - 1.0 / (zeta_bound + 1.0).sqrt())
}

/// Minimax-regret weight (IW-MR).
pub fn iw_mr_weight(series: &Series, timing: Timing) -> Result<WeightResult> {
    let (num, den) = zeta_parts(series, timing)?;
    let sigma2_hat = match timing {
        Timing::Current => den * series.len() as f64,
        Timing::Lagged => den,
    };
    let zeta = ratio_or_inf(num, den);
    let clipped = all_equal_mu(series) || zeta.is_infinite();
    let w = if all_equal_mu(series) { 0.0 } else { minimax_weight_from_bound(zeta)? };
    Ok(WeightResult {
        w,
        zeta_bound: Some(zeta),
        sigma2_hat: Some(sigma2_hat),
        clipped,
    })
}

/// IW-MR with the noise estimated from deviations around the series mean,
/// `Σ(Y_t - Ȳ)² / T(T-1)`.
pub fn iw_mr2_weight(series: &Series) -> Result<WeightResult> {
    require_len(series, 2, "IW-MR2")?;
    let y = &series.values;
    let m = y.len() as f64;
    let num = max_sq_dev(y, series.mu);
    let den = sum_sq_dev(y, mean(y)) / (m * (m - 1.0));
    let zeta = ratio_or_inf(num, den);
    let clipped = all_equal_mu(series) || zeta.is_infinite();
    let w = if all_equal_mu(series) { 0.0 } else { minimax_weight_from_bound(zeta)? };
    Ok(WeightResult {
        w,
        zeta_bound: Some(zeta),
        sigma2_hat: Some(den * m),
        clipped,
    })
}

/// `(1/a) / (1/a + 1/b)` written as `b / (a + b)`, with the degenerate
/// conventions: both zero → 0, only `a` zero → 1.
fn inverse_error_weight(ts_err: f64, pool_err: f64) -> WeightResult {
    match (ts_err == 0.0, pool_err == 0.0) {
        (true, true) => WeightResult::plain(0.0, true),
        (true, false) => WeightResult::plain(1.0, true),
        (false, true) => WeightResult::plain(0.0, true),
        (false, false) => WeightResult::plain(pool_err / (ts_err + pool_err), false),
    }
}

/// In-sample inverse-MSFE weight (IW-MSFE-IS).
pub fn iw_msfe_is_weight(series: &Series) -> Result<WeightResult> {
    require_len(series, 2, "IW-MSFE-IS")?;
    let y = &series.values;
    Ok(inverse_error_weight(sum_sq_dev(y, mean(y)), sum_sq_dev(y, series.mu)))
}

/// Out-of-sample inverse-MSFE weight (IW-MSFE-OOS) over the last `p` one-step errors.
///
/// The TS forecast of `Y_t` is the mean of all earlier values, or of the last
/// `window` of them when a rolling window is given.
pub fn iw_msfe_oos_weight(series: &Series, p: usize, window: Option<usize>) -> Result<WeightResult> {
    let t = series.len();
    if p == 0 || p >= t {
        return Err(Error::domain(format!("IW-MSFE-OOS needs 1 <= P < T, got P = {p}, T = {t}")));
    }
    if window == Some(0) {
        return Err(Error::domain("IW-MSFE-OOS rolling window must be at least 1"));
    }
    let y = &series.values;
    let (mut ts_err, mut pool_err) = (0.0, 0.0);
    for idx in (t - p)..t {
        let lo = window.map_or(0, |r| idx.saturating_sub(r));
        let ts = mean(&y[lo..idx]);
        ts_err += (y[idx] - ts).powi(2);
        pool_err += (y[idx] - series.mu).powi(2);
    }
    Ok(inverse_error_weight(ts_err, pool_err))
}

fn check_variance_params(lambda2: f64, sigma2: f64, t: usize) -> Result<()> {
    if !(lambda2 >= 0.0) || !lambda2.is_finite() {
        return Err(Error::domain(format!("lambda2 must be finite and >= 0, got {lambda2}")));
    }
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::domain(format!("sigma2 must be finite and > 0, got {sigma2}")));
    }
    if t == 0 {
        return Err(Error::domain("T must be at least 1"));
    }
    Ok(())
}

/// Oracle weight `λ² / (λ² + σ²/T)` from known individual parameters.
pub fn oracle_weight(lambda2: f64, sigma2: f64, t: usize) -> Result<f64> {
    check_variance_params(lambda2, sigma2, t)?;
    Ok(lambda2 / (lambda2 + sigma2 / t as f64))
}

/// James-Stein weight: the oracle formula fed with homogeneous, cross-sectional parameters.
pub fn james_stein_weight(lambda2: f64, sigma2: f64, t: usize) -> Result<f64> {
    check_variance_params(lambda2, sigma2, t)?;
    Ok(lambda2 / (lambda2 + sigma2 / t as f64))
}

/// Homogeneous variance estimates for a feasible James-Stein forecast.
///
/// `σ̂²` averages [`sigma2_hat_diff`] over units; `λ̂²` is the cross-sectional
/// variance of unit means (divisor N-1) less `σ̂²/T`, floored at 0.
pub fn js_homogeneous_estimates(dataset: &PanelDataset) -> Result<(f64, f64)> {
    if !dataset.is_balanced() {
        return Err(Error::domain("James-Stein estimates need a balanced panel"));
    }
    let t = dataset.common_span().unwrap_or(0);
    let n = dataset.num_units();
    if t < 2 || n < 2 {
        return Err(Error::domain(format!(
            "James-Stein estimates need N >= 2 and T >= 2, got N = {n}, T = {t}"
        )));
    }
    let mut sigma_sum = 0.0;
    let mut means = Vec::with_capacity(n);
    for (_, obs) in dataset.units() {
        let values: Vec<f64> = obs.iter().map(|o| o.outcome).collect();
        sigma_sum += sigma2_hat_diff(&values)?;
        means.push(mean(&values));
    }
    let sigma2 = sigma_sum / n as f64;
    let grand = mean(&means);
    let var_means = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (n - 1) as f64;
    let lambda2 = (var_means - sigma2 / t as f64).max(0.0);
    Ok((lambda2, sigma2))
}

/// The weighting method of a [`WeightRule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum WeightKind {
    IwO,
    IwMr,
    IwMr2,
    IwMsfeIs,
    IwMsfeOos { p: usize, window: Option<usize> },
    Oracle { lambda2: f64, sigma2: f64 },
    JamesStein { lambda2: f64, sigma2: f64 },
    Constant { c: f64 },
}

/// A weight method together with its information timing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightRule {
    #[serde(flatten)]
    pub kind: WeightKind,
    #[serde(default)]
    pub timing: Timing,
}

impl WeightRule {
    pub fn new(kind: WeightKind, timing: Timing) -> Result<Self> {
        let rule = Self { kind, timing };
        rule.validate()?;
        Ok(rule)
    }

    pub fn current(kind: WeightKind) -> Self {
        Self {
            kind,
            timing: Timing::Current,
        }
    }

    pub fn lagged(kind: WeightKind) -> Self {
        Self {
            kind,
            timing: Timing::Lagged,
        }
    }

    pub fn iw_mr() -> Self {
        Self::current(WeightKind::IwMr)
    }

    /// Checks parameter ranges and that the kind supports the timing.
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            WeightKind::Constant { c } if !(0.0..=1.0).contains(&c) => {
                Err(Error::config(format!("constant weight must lie in [0, 1], got {c}")))
            }
            WeightKind::IwMsfeOos { p: 0, .. } => Err(Error::config("IW-MSFE-OOS needs P >= 1")),
            WeightKind::IwMsfeOos { window: Some(0), .. } => {
                Err(Error::config("IW-MSFE-OOS rolling window must be at least 1"))
            }
            WeightKind::Oracle { lambda2, sigma2 } | WeightKind::JamesStein { lambda2, sigma2 }
                if !(lambda2 >= 0.0 && sigma2 > 0.0 && lambda2.is_finite() && sigma2.is_finite()) =>
            {
                Err(Error::config(format!(
                    "need lambda2 >= 0 and sigma2 > 0, got lambda2 = {lambda2}, sigma2 = {sigma2}"
                )))
            }
            WeightKind::IwMr2 | WeightKind::IwMsfeIs | WeightKind::IwMsfeOos { .. }
                if self.timing == Timing::Lagged =>
            {
                Err(Error::config(format!("{} supports current timing only", self.label())))
            }
            _ => Ok(()),
        }
    }

    /// Shortest series (as passed to [`WeightRule::evaluate`]) the rule accepts.
    pub fn min_len(&self) -> usize {
        match self.kind {
            WeightKind::IwO | WeightKind::IwMr | WeightKind::IwMr2 | WeightKind::IwMsfeIs => 2,
            WeightKind::IwMsfeOos { p, .. } => p + 1,
            WeightKind::Oracle { .. } | WeightKind::JamesStein { .. } | WeightKind::Constant { .. } => 1,
        }
    }

    /// Weight for `series`, interpreted according to the rule's timing
    /// (for lagged rules `series` is the `T-1` information set).
    pub fn evaluate(&self, series: &Series) -> Result<WeightResult> {
        self.validate()?;
        match self.kind {
            WeightKind::IwO => iw_o_weight(series, self.timing),
            WeightKind::IwMr => iw_mr_weight(series, self.timing),
            WeightKind::IwMr2 => iw_mr2_weight(series),
            WeightKind::IwMsfeIs => iw_msfe_is_weight(series),
            WeightKind::IwMsfeOos { p, window } => iw_msfe_oos_weight(series, p, window),
            WeightKind::Oracle { lambda2, sigma2 } => {
                let t = self.effective_span(series);
                Ok(WeightResult::plain(oracle_weight(lambda2, sigma2, t)?, false))
            }
            WeightKind::JamesStein { lambda2, sigma2 } => {
                let t = self.effective_span(series);
                Ok(WeightResult::plain(james_stein_weight(lambda2, sigma2, t)?, false))
            }
            WeightKind::Constant { c } => Ok(WeightResult::plain(c, false)),
        }
    }

    // The lagged TS forecast is one observation, so its noise variance is σ².
    fn effective_span(&self, series: &Series) -> usize {
        match self.timing {
            Timing::Current => series.len(),
            Timing::Lagged => 1,
        }
    }

    /// Short label such as `IW-MR` or `IW-MSFE-OOS(P=2)`.
    pub fn label(&self) -> String {
        let base = match self.kind {
            WeightKind::IwO => "IW-O".to_string(),
            WeightKind::IwMr => "IW-MR".to_string(),
            WeightKind::IwMr2 => "IW-MR2".to_string(),
            WeightKind::IwMsfeIs => "IW-MSFE-IS".to_string(),
            WeightKind::IwMsfeOos { p, window: None } => format!("IW-MSFE-OOS(P={p})"),
            WeightKind::IwMsfeOos { p, window: Some(r) } => format!("IW-MSFE-OOS(P={p},R={r})"),
            WeightKind::Oracle { .. } => "Oracle".to_string(),
            WeightKind::JamesStein { .. } => "JS-fixed".to_string(),
            WeightKind::Constant { c } => format!("Constant({c})"),
        };
        match self.timing {
            Timing::Current => base,
            Timing::Lagged => format!("{base}[lagged]"),
        }
    }
}

impl fmt::Display for WeightRule {
    /// Renders the text form accepted by [`FromStr`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = match self.kind {
            WeightKind::IwO => "iw-o".to_string(),
            WeightKind::IwMr => "iw-mr".to_string(),
            WeightKind::IwMr2 => "iw-mr2".to_string(),
            WeightKind::IwMsfeIs => "iw-msfe-is".to_string(),
            WeightKind::IwMsfeOos { p, window } => match window {
                Some(r) => format!("iw-msfe-oos:p={p}:window={r}"),
                None => format!("iw-msfe-oos:p={p}"),
            },
            WeightKind::Oracle { lambda2, sigma2 } => format!("oracle:lambda2={lambda2}:sigma2={sigma2}"),
            WeightKind::JamesStein { lambda2, sigma2 } => format!("js:lambda2={lambda2}:sigma2={sigma2}"),
            WeightKind::Constant { c } => format!("constant:c={c}"),
        };
        if self.timing == Timing::Lagged {
            out.push_str(":lagged");
        }
        f.write_str(&out)
    }
}

impl FromStr for WeightRule {
    type Err = Error;

    /// Parses `kind[:timing][:param=value]...`.
    ///
    /// Kinds: `iw-o`, `iw-mr`, `iw-mr2`, `iw-msfe-is`, `iw-msfe-oos` (`p`,
    /// optional `window`), `oracle` and `js` (`lambda2`, `sigma2`), `constant`
    /// (`c`, or a bare number as in `constant:0`). Timing is `current`
    /// (default) or `lagged`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let kind_name = parts.next().unwrap_or_default().trim().to_ascii_lowercase();
        let mut timing = Timing::Current;
        let mut params: Vec<(String, f64)> = Vec::new();
        let mut bare: Option<f64> = None;
        for part in parts {
            let part = part.trim();
            match part.to_ascii_lowercase().as_str() {
                "current" => timing = Timing::Current,
                "lagged" => timing = Timing::Lagged,
                _ => {
                    if let Some((k, v)) = part.split_once('=') {
                        let value = v
                            .trim()
                            .parse::<f64>()
                            .map_err(|_| Error::config(format!("rule {s:?}: {v:?} is not a number")))?;
                        params.push((k.trim().to_ascii_lowercase(), value));
                    } else if let Ok(v) = part.parse::<f64>() {
                        bare = Some(v);
                    } else {
                        return Err(Error::config(format!("rule {s:?}: unrecognized segment {part:?}")));
                    }
                }
            }
        }
        let get = |name: &str| params.iter().find(|(k, _)| k == name).map(|&(_, v)| v);
        let need = |name: &str| get(name).ok_or_else(|| Error::config(format!("rule {s:?} needs {name}=<value>")));
        let as_count = |name: &str, v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::config(format!("rule {s:?}: {name} must be a non-negative integer")))
            }
        };
        let known: &[&str] = match kind_name.as_str() {
            "iw-msfe-oos" => &["p", "window"],
            "oracle" | "js" | "james-stein" => &["lambda2", "sigma2"],
            "constant" => &["c"],
            _ => &[],
        };
        if let Some((k, _)) = params.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            return Err(Error::config(format!("rule {s:?}: unknown parameter {k:?}")));
        }
        let kind = match kind_name.as_str() {
            "iw-o" => WeightKind::IwO,
            "iw-mr" => WeightKind::IwMr,
            "iw-mr2" => WeightKind::IwMr2,
            "iw-msfe-is" => WeightKind::IwMsfeIs,
            "iw-msfe-oos" => WeightKind::IwMsfeOos {
                p: as_count("p", get("p").or(bare).unwrap_or(1.0))?,
                window: get("window").map(|v| as_count("window", v)).transpose()?,
            },
            "oracle" => WeightKind::Oracle {
                lambda2: need("lambda2")?,
                sigma2: need("sigma2")?,
            },
            "js" | "james-stein" => WeightKind::JamesStein {
                lambda2: need("lambda2")?,
                sigma2: need("sigma2")?,
            },
            "constant" => WeightKind::Constant {
                c: get("c")
                    .or(bare)
                    .ok_or_else(|| Error::config(format!("rule {s:?} needs a constant, e.g. constant:0.5")))?,
            },
            other => {
                return Err(Error::config(format!(
                    "unknown weight rule {other:?} (expected iw-o, iw-mr, iw-mr2, iw-msfe-is, iw-msfe-oos, oracle, js, constant)"
                )))
            }
        };
        WeightRule::new(kind, timing)
    }
}
