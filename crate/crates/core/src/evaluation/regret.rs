//! MSFE, regret and minimax-regret scans over a signal-to-noise grid.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt_real;
use crate::forecast::{Method, TsVariant};
use crate::simulation::{self, DistributionSpec, ExperimentConfig, Preset};

/// Variance of the random effect (`lambda2`) and of the shocks (`sigma2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaPoint {
    pub lambda2: f64,
    pub sigma2: f64,
}

impl ThetaPoint {
    pub fn new(lambda2: f64, sigma2: f64) -> Result<Self> {
        if !(lambda2 >= 0.0 && lambda2.is_finite()) {
            return Err(Error::domain(format!("lambda2 must be finite and >= 0, got {lambda2}")));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::domain(format!("sigma2 must be finite and > 0, got {sigma2}")));
        }
        Ok(Self { lambda2, sigma2 })
    }

    pub fn ratio(&self) -> f64 {
        self.lambda2 / self.sigma2
    }
}

/// Parameter points whose signal-to-noise ratios lie in `[1 - ν, 1 + ν]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaGrid {
    pub nu: f64,
    pub points: Vec<ThetaPoint>,
}

impl ThetaGrid {
    /// `nu` may be 1 so that grids reaching a ratio of 2 are representable.
    pub fn new(nu: f64, points: Vec<ThetaPoint>) -> Result<Self> {
        if !(0.0..=1.0).contains(&nu) {
            return Err(Error::domain(format!("nu must lie in [0, 1], got {nu}")));
        }
        if points.is_empty() {
            return Err(Error::domain("theta grid is empty"));
        }
        const TOL: f64 = 1e-12;
        for p in &points {
            ThetaPoint::new(p.lambda2, p.sigma2)?;
            let r = p.ratio();
            if r < 1.0 - nu - TOL || r > 1.0 + nu + TOL {
                return Err(Error::domain(format!("ratio {r} outside [1 - {nu}, 1 + {nu}]")));
            }
        }
        Ok(Self { nu, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Exact MSFE for the methods that have one, assuming the effect has mean μ.
///
/// `TS-last` has `2σ²`, `TS-mean` over `t` observations has `σ²(1 + 1/t)` and
/// `Pool` has `λ² + σ²`.
pub fn msfe_closed_form(method: &Method, theta: ThetaPoint, t: usize) -> Result<f64> {
    let ThetaPoint { lambda2, sigma2 } = theta;
    match method {
        Method::Ts { variant: TsVariant::Last } => Ok(2.0 * sigma2),
        Method::Ts { variant: TsVariant::Mean } if t >= 1 => Ok(sigma2 * (1.0 + 1.0 / t as f64)),
        Method::Pool => Ok(lambda2 + sigma2),
        other => Err(Error::domain(format!("{} has no distribution-free closed-form MSFE", other.label()))),
    }
}

/// Mean squared error over `(forecast, realization)` pairs.
pub fn msfe_empirical(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::domain("MSFE of an empty collection"));
    }
    let sq: Vec<f64> = pairs.iter().map(|(f, y)| (y - f).powi(2)).collect();
    Ok(super::pairwise_mean(&sq))
}

/// Each MSFE minus the smallest.
pub fn regret(msfes: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let best = msfes.values().copied().fold(f64::INFINITY, f64::min);
    msfes.iter().map(|(k, v)| (k.clone(), v - best)).collect()
}

/// One method's MSFE and regret at one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretPoint {
    pub theta: ThetaPoint,
    pub msfe: f64,
    pub msfe_se: f64,
    pub regret: f64,
    pub regret_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCurve {
    pub method: String,
    pub points: Vec<RegretPoint>,
    pub max_regret: f64,
    pub max_regret_se: f64,
    pub argmax: ThetaPoint,
}

impl MethodCurve {
    pub fn new(method: impl Into<String>, points: Vec<RegretPoint>) -> Result<Self> {
        let method = method.into();
        let top = points
            .iter()
            .copied()
            .reduce(|a, b| if b.regret > a.regret { b } else { a })
            .ok_or_else(|| Error::domain(format!("empty regret curve for {method}")))?;
        Ok(Self {
            method,
            points,
            max_regret: top.regret,
            max_regret_se: top.regret_se,
            argmax: top.theta,
        })
    }
}

/// Per-method regret curves and their maxima.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub curves: Vec<MethodCurve>,
}

impl RegretReport {
    pub fn curve(&self, method: &str) -> Option<&MethodCurve> {
        self.curves.iter().find(|c| c.method == method)
    }

    pub fn max_regret(&self, method: &str) -> Option<f64> {
        self.curve(method).map(|c| c.max_regret)
    }

    /// The method with the smallest maximum regret.
    pub fn minimax(&self) -> Option<&MethodCurve> {
        self.curves.iter().reduce(|a, b| if b.max_regret < a.max_regret { b } else { a })
    }

    /// One row per grid point per method.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["point", "lambda2", "sigma2", "method", "msfe", "msfe_se", "regret", "regret_se"])?;
        for c in &self.curves {
            for (i, p) in c.points.iter().enumerate() {
                w.write_record([
                    i.to_string(),
                    fmt_real(p.theta.lambda2),
                    fmt_real(p.theta.sigma2),
                    c.method.clone(),
                    fmt_real(p.msfe),
                    fmt_real(p.msfe_se),
                    fmt_real(p.regret),
                    fmt_real(p.regret_se),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let entries: serde_json::Map<String, serde_json::Value> = self
            .curves
            .iter()
            .map(|c| {
                (
                    c.method.clone(),
                    serde_json::json!({
                        "max_regret": c.max_regret,
                        "max_regret_se": finite_or_null(c.max_regret_se),
                        "argmax": { "lambda2": c.argmax.lambda2, "sigma2": c.argmax.sigma2 },
                    }),
                )
            })
            .collect();
        serde_json::Value::Object(entries)
    }
}

pub(crate) fn finite_or_null(x: f64) -> serde_json::Value {
    if x.is_finite() {
        serde_json::json!(x)
    } else {
        serde_json::Value::Null
    }
}

/// Monte Carlo settings for [`minimax_regret_scan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    /// Observed periods before the forecast target.
    pub t: usize,
    pub replications: usize,
    pub seed: u64,
}

/// MSFE and regret of each method over `grid`, with Normal effects and
/// shocks. TS and Pool use their closed forms; other methods are simulated
/// with common random numbers at each point.
pub fn minimax_regret_scan(grid: &ThetaGrid, methods: &[Method], mc: &ScanConfig) -> Result<RegretReport> {
    let config = ExperimentConfig {
        preset: Preset::Custom,
        t: mc.t,
        replications: mc.replications,
        seed: mc.seed,
        mu: 0.0,
        effects: Vec::new(),
        shock: DistributionSpec::Normal { mean: 0.0, variance: 1.0 },
        grid: Some(grid.clone()),
        methods: methods.to_vec(),
        scatter: false,
    };
    Ok(simulation::run_experiment(&config)?.regret)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::{WeightKind, WeightRule};

    #[test]
    fn closed_forms() {
        let unit = ThetaPoint::new(1.0, 1.0).unwrap();
        assert_eq!(msfe_closed_form(&Method::ts(TsVariant::Last), unit, 3).unwrap(), 2.0);
        assert_eq!(msfe_closed_form(&Method::Pool, unit, 3).unwrap(), 2.0);
        assert_eq!(msfe_closed_form(&Method::Pool, ThetaPoint::new(0.0, 1.0).unwrap(), 3).unwrap(), 1.0);
        assert_eq!(msfe_closed_form(&Method::ts(TsVariant::Mean), unit, 4).unwrap(), 1.25);
        assert!(msfe_closed_form(&Method::iw(WeightRule::iw_mr()), unit, 3).is_err());
    }

    #[test]
    fn empirical_msfe() {
        assert_eq!(msfe_empirical(&[(1.0, 1.0), (2.0, 2.0)]).unwrap(), 0.0);
        assert_eq!(msfe_empirical(&[(0.0, 1.0), (0.0, -1.0)]).unwrap(), 1.0);
        assert_eq!(msfe_empirical(&[(1.0, 3.0)]).unwrap(), 4.0);
        assert!(msfe_empirical(&[]).is_err());
    }

    fn map(items: &[(&str, f64)]) -> BTreeMap<String, f64> {
        items.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }

    #[test]
    fn regret_examples() {
        let r = regret(&map(&[("TS", 2.0), ("Pool", 2.0), ("IW", 1.8)]));
        approx::assert_relative_eq!(r["TS"], 0.2, epsilon = 1e-15);
        approx::assert_relative_eq!(r["Pool"], 0.2, epsilon = 1e-15);
        assert_eq!(r["IW"], 0.0);
        assert_eq!(regret(&map(&[("m", 5.0)]))["m"], 0.0);
        assert_eq!(regret(&map(&[("TS", 2.0), ("Pool", 3.0)])), map(&[("TS", 0.0), ("Pool", 1.0)]));
    }

    #[test]
    fn grid_validation() {
        let p = |l| ThetaPoint::new(l, 1.0).unwrap();
        assert!(ThetaGrid::new(0.5, vec![p(0.5), p(1.5)]).is_ok());
        assert!(ThetaGrid::new(0.5, vec![p(0.4)]).is_err());
        assert!(ThetaGrid::new(1.5, vec![p(1.0)]).is_err());
        assert!(ThetaGrid::new(0.5, vec![]).is_err());
        assert!(ThetaPoint::new(1.0, 0.0).is_err());
    }

    #[test]
    fn scan_single_point_ts_pool_tie() {
        let grid = ThetaGrid::new(0.0, vec![ThetaPoint::new(1.0, 1.0).unwrap()]).unwrap();
        let methods = [Method::ts(TsVariant::Last), Method::Pool];
        let mc = ScanConfig { t: 3, replications: 100, seed: 7 };
        let report = minimax_regret_scan(&grid, &methods, &mc).unwrap();
        assert_eq!(report.max_regret("TS-last"), Some(0.0));
        assert_eq!(report.max_regret("Pool"), Some(0.0));
    }

    #[test]
    fn scan_constant_zero_matches_pool() {
        let grid = ThetaGrid::new(0.9, vec![ThetaPoint::new(0.2, 1.0).unwrap(), ThetaPoint::new(1.8, 1.0).unwrap()]).unwrap();
        let zero = WeightRule::lagged(WeightKind::Constant { c: 0.0 });
        let methods = [Method::ts(TsVariant::Last), Method::Pool, Method::iw(zero)];
        let mc = ScanConfig { t: 3, replications: 4000, seed: 3 };
        let report = minimax_regret_scan(&grid, &methods, &mc).unwrap();
        let pool = report.curve("Pool").unwrap();
        let iw = report.curve(&zero.label()).unwrap();
        for (a, b) in pool.points.iter().zip(&iw.points) {
            // Constant(0) is simulated, Pool is closed form: agreement within MC error.
            assert!((a.msfe - b.msfe).abs() < 4.0 * b.msfe_se + 1e-12, "{} vs {}", a.msfe, b.msfe);
        }
    }
}
