//! TS, Pool, IW and James-Stein forecasts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt_real;
use crate::panel::{PanelDataset, Series};
use crate::weights::{js_homogeneous_estimates, Timing, WeightResult, WeightRule};

/// Which time-series forecast to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TsVariant {
    /// The unit's sample mean.
    Mean,
    /// The unit's last observation.
    Last,
}

impl TsVariant {
    /// The TS forecast that pairs with a weight rule of the given timing.
    pub fn for_timing(timing: Timing) -> Self {
        match timing {
            Timing::Current => TsVariant::Mean,
            Timing::Lagged => TsVariant::Last,
        }
    }
}

pub fn ts_forecast(series: &Series, variant: TsVariant) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::domain("TS forecast of an empty series"));
    }
    Ok(match variant {
        TsVariant::Mean => series.mean(),
        TsVariant::Last => series.last(),
    })
}

pub fn pool_forecast(mu: f64) -> f64 {
    mu
}

/// Weighted average `Σ value_k · weight_k`; weights must be nonnegative and sum to 1 (±1e-9).
pub fn combine(forecasts: &[(f64, f64)]) -> Result<f64> {
    if forecasts.is_empty() {
        return Err(Error::domain("combine needs at least one forecast"));
    }
    if let Some(&(_, w)) = forecasts.iter().find(|(_, w)| !(*w >= 0.0)) {
        return Err(Error::domain(format!("combination weights must be nonnegative, got {w}")));
    }
    let total: f64 = forecasts.iter().map(|(_, w)| w).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("combination weights sum to {total}, not 1")));
    }
    Ok(forecasts.iter().map(|(v, w)| v * w).sum())
}

/// IW forecast `w·TS + (1-w)·Pool`, written so that `w = 1` and `w = 0`
/// reproduce the base forecasts exactly.
pub fn iw_combine(ts: f64, pool: f64, w: f64) -> f64 {
    if w == 1.0 {
        ts
    } else if w == 0.0 {
        pool
    } else {
        w * ts + (1.0 - w) * pool
    }
}

/// A forecasting method.
///
/// Text form: `ts-mean`, `ts-last`, `pool`, `js`, or a weight rule such as
/// `iw-mr:lagged` (see [`WeightRule`]'s `FromStr`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Ts { variant: TsVariant },
    Pool,
    Iw { rule: WeightRule },
    /// James-Stein: homogeneous weight estimated from the cross-section.
    Js,
}

impl Method {
    pub fn iw(rule: WeightRule) -> Self {
        Method::Iw { rule }
    }

    pub fn ts(variant: TsVariant) -> Self {
        Method::Ts { variant }
    }

    pub fn label(&self) -> String {
        match self {
            Method::Ts { variant: TsVariant::Mean } => "TS-mean".to_string(),
            Method::Ts { variant: TsVariant::Last } => "TS-last".to_string(),
            Method::Pool => "Pool".to_string(),
            Method::Iw { rule } => rule.label(),
            Method::Js => "JS".to_string(),
        }
    }
}

impl fmt::Display for Method {
    /// The text form accepted by [`FromStr`]; see [`Method::label`] for display names.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Ts { variant: TsVariant::Mean } => f.write_str("ts-mean"),
            Method::Ts { variant: TsVariant::Last } => f.write_str("ts-last"),
            Method::Pool => f.write_str("pool"),
            Method::Js => f.write_str("js"),
            Method::Iw { rule } => write!(f, "{rule}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ts-mean" | "ts" => Ok(Method::ts(TsVariant::Mean)),
            "ts-last" => Ok(Method::ts(TsVariant::Last)),
            "pool" => Ok(Method::Pool),
            "js" | "james-stein" => Ok(Method::Js),
            _ => s.parse().map(Method::iw),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

/// One forecast, or the reason it could not be produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub unit: String,
    /// Last period used; the forecast targets the next period.
    pub origin: i64,
    pub method: String,
    pub value: Option<f64>,
    pub weight: Option<WeightResult>,
    pub skipped: Option<String>,
}

impl ForecastRecord {
    fn ok(unit: &str, origin: i64, method: &Method, value: f64, weight: Option<WeightResult>) -> Self {
        Self {
            unit: unit.to_string(),
            origin,
            method: method.label(),
            value: Some(value),
            weight,
            skipped: None,
        }
    }

    fn skip(unit: &str, origin: i64, method: &Method, reason: String) -> Self {
        Self {
            unit: unit.to_string(),
            origin,
            method: method.label(),
            value: None,
            weight: None,
            skipped: Some(reason),
        }
    }
}

/// Which forecast origins to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum OriginPolicy {
    /// Each unit's last observed period, using all data.
    #[default]
    Latest,
    /// Every period at which a unit has at least `min_history` visible
    /// observations; with `window`, only the last `window` periods are visible.
    AllOrigins { min_history: usize, window: Option<usize> },
}

struct OriginView {
    origin: i64,
    panel: PanelDataset,
    mus: BTreeMap<String, f64>,
    js: Option<std::result::Result<(f64, f64), String>>,
}

fn origin_view(dataset: &PanelDataset, origin: i64, window: Option<usize>, want_js: bool) -> Result<OriginView> {
    let panel = match window {
        Some(r) => dataset.filter(|o| o.period <= origin && o.period > origin - r as i64),
        None => dataset.up_to(origin),
    };
    let mus = panel.shrink_points()?;
    let js = want_js.then(|| js_homogeneous_estimates(&panel).map_err(|e| e.to_string()));
    Ok(OriginView { origin, panel, mus, js })
}

fn unit_records(series: &Series, origin: i64, methods: &[Method], js: Option<&std::result::Result<(f64, f64), String>>) -> Vec<ForecastRecord> {
    let unit = series.unit.as_str();
    methods
        .iter()
        .map(|method| match forecast_one(series, method, js) {
            Ok((value, weight)) => ForecastRecord::ok(unit, origin, method, value, weight),
            Err(reason) => ForecastRecord::skip(unit, origin, method, reason),
        })
        .collect()
}

fn forecast_one(
    series: &Series,
    method: &Method,
    js: Option<&std::result::Result<(f64, f64), String>>,
) -> std::result::Result<(f64, Option<WeightResult>), String> {
    let mu = series.mu;
    match method {
        Method::Ts { variant } => ts_forecast(series, *variant).map(|v| (v, None)).map_err(|e| e.to_string()),
        Method::Pool => Ok((pool_forecast(mu), None)),
        Method::Iw { rule } => {
            let (info, ts) = match rule.timing {
                Timing::Current => (series.clone(), series.mean()),
                Timing::Lagged => {
                    if series.len() < 2 {
                        return Err(format!("{} needs at least 2 observations", rule.label()));
                    }
                    (series.prefix(series.len() - 1).map_err(|e| e.to_string())?, series.last())
                }
            };
            if info.len() < rule.min_len() {
                return Err(format!(
                    "{} needs at least {} observations in its information set, got {}",
                    rule.label(),
                    rule.min_len(),
                    info.len()
                ));
            }
            let weight = rule.evaluate(&info).map_err(|e| e.to_string())?;
            Ok((iw_combine(ts, pool_forecast(mu), weight.w), Some(weight)))
        }
        Method::Js => {
            let (lambda2, sigma2) = match js {
                Some(Ok(est)) => *est,
                Some(Err(reason)) => return Err(reason.clone()),
                None => return Err("James-Stein estimates unavailable".to_string()),
            };
            let t = series.len() as f64;
            let w = if sigma2 > 0.0 {
                lambda2 / (lambda2 + sigma2 / t)
            } else if lambda2 > 0.0 {
                1.0
            } else {
                0.0
            };
            let weight = WeightResult {
                w,
                zeta_bound: None,
                sigma2_hat: Some(sigma2),
                clipped: sigma2 == 0.0,
            };
            Ok((iw_combine(series.mean(), pool_forecast(mu), w), Some(weight)))
        }
    }
}

/// Produces one record per `(unit, origin, method)`, sorted by unit, origin
/// and the method's position in `methods`.
///
/// μ, and the James-Stein estimates, are recomputed at each origin from the
/// data visible there. Per-unit failures become skipped records.
pub fn forecast_panel(dataset: &PanelDataset, methods: &[Method], policy: OriginPolicy) -> Result<Vec<ForecastRecord>> {
    if methods.is_empty() {
        return Err(Error::config("no forecasting methods requested"));
    }
    for m in methods {
        if let Method::Iw { rule } = m {
            rule.validate()?;
        }
    }
    let want_js = methods.contains(&Method::Js);
    let mut records = match policy {
        OriginPolicy::Latest => {
            let view = origin_view(dataset, i64::MAX, None, want_js)?;
            let series = view.panel.series()?;
            let last: BTreeMap<&str, i64> = dataset
                .units()
                .map(|(u, obs)| (u, obs[obs.len() - 1].period))
                .collect();
            series
                .par_iter()
                .flat_map_iter(|s| unit_records(s, last[s.unit.as_str()], methods, view.js.as_ref()))
                .collect::<Vec<_>>()
        }
        OriginPolicy::AllOrigins { min_history, window } => {
            if window == Some(0) {
                return Err(Error::config("rolling window must be at least 1"));
            }
            let min_history = min_history.max(1);
            let periods: BTreeSet<i64> = dataset.periods().into_iter().collect();
            let views = periods
                .par_iter()
                .map(|&o| origin_view(dataset, o, window, want_js))
                .collect::<Result<Vec<_>>>()?;
            views
                .par_iter()
                .flat_map_iter(|view| {
                    let active: Vec<Series> = view
                        .panel
                        .units()
                        .filter(|(_, obs)| obs.len() >= min_history && obs[obs.len() - 1].period == view.origin)
                        .map(|(u, obs)| {
                            Series::new(u, obs.iter().map(|o| o.outcome).collect(), view.mus[u])
                                .expect("validated panel values are finite")
                        })
                        .collect();
                    active
                        .into_iter()
                        .flat_map(|s| unit_records(&s, view.origin, methods, view.js.as_ref()))
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        }
    };
    let rank: BTreeMap<String, usize> = methods
        .iter()
        .enumerate()
        .rev()
        .map(|(i, m)| (m.label(), i))
        .collect();
    records.sort_by(|a, b| {
        (a.unit.as_str(), a.origin, rank[&a.method]).cmp(&(b.unit.as_str(), b.origin, rank[&b.method]))
    });
    Ok(records)
}

const HEADER: [&str; 8] = ["unit", "origin", "method", "value", "weight", "zeta_bound", "clipped", "note"];

fn opt_real(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

/// Writes records as CSV with columns
/// `unit, origin, method, value, weight, zeta_bound, clipped, note`.
pub fn write_records<W: Write>(records: &[ForecastRecord], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(HEADER)?;
    for r in records {
        w.write_record([
            r.unit.clone(),
            r.origin.to_string(),
            r.method.clone(),
            opt_real(r.value),
            opt_real(r.weight.map(|x| x.w)),
            opt_real(r.weight.and_then(|x| x.zeta_bound)),
            r.weight.map(|x| x.clipped.to_string()).unwrap_or_default(),
            r.skipped.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads records written by [`write_records`]. `sigma2_hat` is not stored and reads back as `None`.
pub fn read_records<R: Read>(source: R) -> Result<Vec<ForecastRecord>> {
    let mut reader = csv::Reader::from_reader(source);
    let headers = reader.headers()?.clone();
    for (i, name) in HEADER.iter().enumerate().take(7) {
        if headers.get(i) != Some(*name) {
            return Err(Error::Parse {
                row: 1,
                message: format!("expected column {name:?} at position {}", i + 1),
            });
        }
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        let field = |k: usize| rec.get(k).unwrap_or("").trim();
        let real = |k: usize| -> Result<Option<f64>> {
            let s = field(k);
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>().map(Some).map_err(|_| Error::Parse {
                row,
                message: format!("{:?} in column {} is not a number", s, HEADER[k]),
            })
        };
        let origin = field(1).parse::<i64>().map_err(|_| Error::Parse {
            row,
            message: format!("origin {:?} is not an integer", field(1)),
        })?;
        let value = real(3)?;
        let weight = match real(4)? {
            Some(w) => Some(WeightResult {
                w,
                zeta_bound: real(5)?,
                sigma2_hat: None,
                clipped: match field(6) {
                    "true" => true,
                    "false" | "" => false,
                    other => {
                        return Err(Error::Parse {
                            row,
                            message: format!("clipped must be true or false, got {other:?}"),
                        })
                    }
                },
            }),
            None => None,
        };
        let note = field(7);
        out.push(ForecastRecord {
            unit: field(0).to_string(),
            origin,
            method: field(2).to_string(),
            value,
            weight,
            skipped: (!note.is_empty()).then(|| note.to_string()),
        });
    }
    Ok(out)
}

impl FromStr for TsVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(TsVariant::Mean),
            "last" => Ok(TsVariant::Last),
            other => Err(Error::config(format!("unknown TS variant {other:?} (expected mean or last)"))),
        }
    }
}
