//! Panel ingestion and first-stage transforms.
//!
//! A [`PanelDataset`] holds `(unit, period, outcome)` observations, optionally
//! with covariates and a group label, sorted by `(unit, period)`. Units need
//! not share the same span; weights and forecasts are always computed on each
//! unit's own observations.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt_real;

/// One panel cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub unit: String,
    pub period: i64,
    pub outcome: f64,
    /// Empty when the panel carries no covariates.
    pub covariates: Vec<f64>,
    pub group: Option<String>,
}

impl Observation {
    pub fn new(unit: impl Into<String>, period: i64, outcome: f64) -> Self {
        Self {
            unit: unit.into(),
            period,
            outcome,
            covariates: Vec::new(),
            group: None,
        }
    }

    pub fn with_covariates(mut self, covariates: Vec<f64>) -> Self {
        self.covariates = covariates;
        self
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }
}

/// How the shrink point μ is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum MuMode {
    /// μ is known, e.g. 0 for demeaned outcomes or first-stage residuals.
    Known(f64),
    /// μ is the mean of every outcome in the panel.
    Pooled,
    /// μ is the mean of the outcomes in the unit's group.
    GroupPooled,
}

/// A validated panel, sorted by `(unit, period)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    observations: Vec<Observation>,
    covariate_names: Vec<String>,
    balanced: bool,
    common_span: Option<usize>,
    mu_mode: MuMode,
}

impl PanelDataset {
    /// Validates and sorts the observations.
    ///
    /// Every observation must carry the same number of covariates, all reals
    /// must be finite, `(unit, period)` pairs must be unique and a unit's
    /// group label (if any) must not change over time.
    pub fn new(mut observations: Vec<Observation>, mu_mode: MuMode) -> Result<Self> {
        if let MuMode::Known(v) = mu_mode {
            if !v.is_finite() {
                return Err(Error::validation(format!("known mu must be finite, got {v}")));
            }
        }
        let k = observations.first().map_or(0, |o| o.covariates.len());
        for o in &observations {
            if !o.outcome.is_finite() {
                return Err(Error::validation(format!(
                    "non-finite outcome {} at ({}, {})",
                    o.outcome, o.unit, o.period
                )));
            }
            if o.covariates.len() != k {
                return Err(Error::validation(format!(
                    "covariate length mismatch at ({}, {}): expected {k}, got {}",
                    o.unit,
                    o.period,
                    o.covariates.len()
                )));
            }
            if let Some(x) = o.covariates.iter().find(|x| !x.is_finite()) {
                return Err(Error::validation(format!(
                    "non-finite covariate {x} at ({}, {})",
                    o.unit, o.period
                )));
            }
        }
        observations.sort_by(|a, b| a.unit.cmp(&b.unit).then(a.period.cmp(&b.period)));
        for pair in observations.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.unit == b.unit {
                if a.period == b.period {
                    return Err(Error::validation(format!(
                        "duplicate observation ({}, {})",
                        a.unit, a.period
                    )));
                }
                if a.group != b.group {
                    return Err(Error::validation(format!(
                        "unit {} changes group between periods {} and {}",
                        a.unit, a.period, b.period
                    )));
                }
            }
        }
        if mu_mode == MuMode::GroupPooled && observations.iter().any(|o| o.group.is_none()) {
            return Err(Error::validation("group-pooled mu requires a group label on every observation"));
        }

        let mut spans: Vec<Vec<i64>> = Vec::new();
        let mut last: Option<&str> = None;
        for o in &observations {
            if last != Some(o.unit.as_str()) {
                spans.push(Vec::new());
                last = Some(o.unit.as_str());
            }
            spans.last_mut().expect("pushed above").push(o.period);
        }
        let balanced = spans.windows(2).all(|w| w[0] == w[1]);
        let common_span = if balanced { spans.first().map(Vec::len) } else { None };

        let covariate_names = (0..k).map(|j| format!("x{}", j + 1)).collect();
        Ok(Self {
            observations,
            covariate_names,
            balanced,
            common_span,
            mu_mode,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn is_balanced(&self) -> bool {
        self.balanced
    }

    /// Number of periods per unit when the panel is balanced.
    pub fn common_span(&self) -> Option<usize> {
        self.common_span
    }

    pub fn mu_mode(&self) -> MuMode {
        self.mu_mode
    }

    pub fn with_mu_mode(mut self, mu_mode: MuMode) -> Result<Self> {
        if let MuMode::Known(v) = mu_mode {
            if !v.is_finite() {
                return Err(Error::validation(format!("known mu must be finite, got {v}")));
            }
        }
        if mu_mode == MuMode::GroupPooled && self.observations.iter().any(|o| o.group.is_none()) {
            return Err(Error::validation("group-pooled mu requires a group label on every observation"));
        }
        self.mu_mode = mu_mode;
        Ok(self)
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn num_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    fn with_covariate_names(mut self, names: Vec<String>) -> Self {
        if names.len() == self.covariate_names.len() {
            self.covariate_names = names;
        }
        self
    }

    /// Per-unit slices in unit order.
    pub fn units(&self) -> impl Iterator<Item = (&str, &[Observation])> + '_ {
        self.observations
            .chunk_by(|a, b| a.unit == b.unit)
            .map(|chunk| (chunk[0].unit.as_str(), chunk))
    }

    pub fn num_units(&self) -> usize {
        self.units().count()
    }

    /// Sorted distinct periods.
    pub fn periods(&self) -> Vec<i64> {
        let set: BTreeSet<i64> = self.observations.iter().map(|o| o.period).collect();
        set.into_iter().collect()
    }

    /// Keeps the observations matching `keep`; balance is recomputed.
    pub fn filter(&self, mut keep: impl FnMut(&Observation) -> bool) -> Self {
        let observations: Vec<Observation> =
            self.observations.iter().filter(|o| keep(o)).cloned().collect();
        Self::new(observations, self.mu_mode)
            .expect("a subset of a valid panel is valid")
            .with_covariate_names(self.covariate_names.clone())
    }

    /// Observations with `period <= origin`.
    pub fn up_to(&self, origin: i64) -> Self {
        self.filter(|o| o.period <= origin)
    }

    /// Per-unit shrink points under the dataset's [`MuMode`].
    pub fn shrink_points(&self) -> Result<BTreeMap<String, f64>> {
        match self.mu_mode {
            MuMode::Known(mu) => Ok(self.units().map(|(u, _)| (u.to_string(), mu)).collect()),
            MuMode::Pooled => {
                let mu = pooled_mean(self)?;
                Ok(self.units().map(|(u, _)| (u.to_string(), mu)).collect())
            }
            MuMode::GroupPooled => {
                let means = group_means(self)?;
                Ok(self
                    .units()
                    .map(|(u, obs)| {
                        let g = obs[0].group.as_deref().expect("validated on construction");
                        (u.to_string(), means[g])
                    })
                    .collect())
            }
        }
    }

    /// One [`Series`] per unit, each carrying its shrink point.
    pub fn series(&self) -> Result<Vec<Series>> {
        let mus = self.shrink_points()?;
        self.units()
            .map(|(u, obs)| Series::new(u, obs.iter().map(|o| o.outcome).collect(), mus[u]))
            .collect()
    }
}

/// One unit's ordered outcomes and its shrink point.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub unit: String,
    pub values: Vec<f64>,
    pub mu: f64,
}

impl Series {
    pub fn new(unit: impl Into<String>, values: Vec<f64>, mu: f64) -> Result<Self> {
        let unit = unit.into();
        if values.is_empty() {
            return Err(Error::domain(format!("series for unit {unit} is empty")));
        }
        if values.iter().any(|v| !v.is_finite()) || !mu.is_finite() {
            return Err(Error::domain(format!("series for unit {unit} has non-finite values")));
        }
        Ok(Self { unit, values, mu })
    }

    /// Anonymous series, handy in simulations and tests.
    pub fn from_values(values: &[f64], mu: f64) -> Result<Self> {
        Self::new("", values.to_vec(), mu)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn last(&self) -> f64 {
        *self.values.last().expect("series is non-empty")
    }

    /// The first `len` values, sharing the shrink point.
    pub fn prefix(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.values.len() {
            return Err(Error::domain(format!(
                "prefix of length {len} out of range for series of length {}",
                self.values.len()
            )));
        }
        Ok(Self {
            unit: self.unit.clone(),
            values: self.values[..len].to_vec(),
            mu: self.mu,
        })
    }
}

/// Column mapping for CSV input and output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub unit: String,
    pub period: String,
    pub outcome: String,
    pub covariates: Vec<String>,
    pub group: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            unit: "unit".into(),
            period: "period".into(),
            outcome: "outcome".into(),
            covariates: Vec::new(),
            group: None,
        }
    }
}

impl CsvSchema {
    pub fn new(unit: &str, period: &str, outcome: &str) -> Self {
        Self {
            unit: unit.into(),
            period: period.into(),
            outcome: outcome.into(),
            ..Self::default()
        }
    }

    pub fn with_covariates<S: AsRef<str>>(mut self, names: &[S]) -> Self {
        self.covariates = names.iter().map(|s| s.as_ref().to_string()).collect();
        self
    }

    pub fn with_group(mut self, name: &str) -> Self {
        self.group = Some(name.into());
        self
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::validation(format!("column {name:?} not found in header")))
}

/// Reads a panel from UTF-8 CSV with a header row.
///
/// Row numbers in errors count the header as row 1. The returned dataset uses
/// [`MuMode::Pooled`]; switch with [`PanelDataset::with_mu_mode`].
pub fn load_panel<R: Read>(source: R, schema: &CsvSchema) -> Result<PanelDataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let unit_col = column(&headers, &schema.unit)?;
    let period_col = column(&headers, &schema.period)?;
    let outcome_col = column(&headers, &schema.outcome)?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let group_col = schema.group.as_deref().map(|g| column(&headers, g)).transpose()?;

    let mut observations = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        let field = |col: usize| {
            record.get(col).ok_or_else(|| Error::Parse {
                row,
                message: format!("missing field {}", col + 1),
            })
        };
        let parse_real = |col: usize, what: &str| -> Result<f64> {
            let raw = field(col)?;
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row,
                message: format!("{what} {raw:?} is not a number"),
            })
        };
        let unit = field(unit_col)?.to_string();
        let raw_period = field(period_col)?;
        let period = raw_period.parse::<i64>().map_err(|_| Error::Parse {
            row,
            message: format!("period {raw_period:?} is not an integer"),
        })?;
        let outcome = parse_real(outcome_col, "outcome")?;
        if !outcome.is_finite() {
            return Err(Error::validation(format!(
                "non-finite outcome at row {row} ({unit}, {period})"
            )));
        }
        let covariates = cov_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&c, name)| parse_real(c, name))
            .collect::<Result<Vec<_>>>()?;
        let group = group_col.map(|g| field(g).map(str::to_string)).transpose()?;
        observations.push(Observation {
            unit,
            period,
            outcome,
            covariates,
            group,
        });
    }
    Ok(PanelDataset::new(observations, MuMode::Pooled)?.with_covariate_names(schema.covariates.clone()))
}

/// Writes a panel in the schema's column layout, reals at full precision.
pub fn write_panel<W: Write>(dataset: &PanelDataset, sink: W, schema: &CsvSchema) -> Result<()> {
    if schema.covariates.len() != dataset.num_covariates() {
        return Err(Error::validation(format!(
            "schema names {} covariates, dataset has {}",
            schema.covariates.len(),
            dataset.num_covariates()
        )));
    }
    let mut writer = csv::Writer::from_writer(sink);
    let mut header = vec![schema.unit.clone(), schema.period.clone(), schema.outcome.clone()];
    header.extend(schema.covariates.iter().cloned());
    if let Some(g) = &schema.group {
        header.push(g.clone());
    }
    writer.write_record(&header)?;
    for o in dataset.observations() {
        let mut row = vec![o.unit.clone(), o.period.to_string(), fmt_real(o.outcome)];
        row.extend(o.covariates.iter().map(|&x| fmt_real(x)));
        if schema.group.is_some() {
            row.push(o.group.clone().unwrap_or_default());
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Mean of every outcome in the panel.
pub fn pooled_mean(dataset: &PanelDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::domain("pooled mean of an empty panel"));
    }
    let sum: f64 = dataset.observations().iter().map(|o| o.outcome).sum();
    Ok(sum / dataset.len() as f64)
}

/// Mean outcome per group label.
pub fn group_means(dataset: &PanelDataset) -> Result<BTreeMap<String, f64>> {
    if dataset.is_empty() {
        return Err(Error::domain("group means of an empty panel"));
    }
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for o in dataset.observations() {
        let g = o
            .group
            .as_ref()
            .ok_or_else(|| Error::validation(format!("observation ({}, {}) has no group", o.unit, o.period)))?;
        let e = acc.entry(g.clone()).or_insert((0.0, 0));
        e.0 += o.outcome;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect())
}

/// Subtracts the pooled mean from every outcome; the result has μ known to be 0.
pub fn demean(dataset: &PanelDataset) -> Result<PanelDataset> {
    let mu = pooled_mean(dataset)?;
    let observations = dataset
        .observations()
        .iter()
        .map(|o| Observation {
            outcome: o.outcome - mu,
            ..o.clone()
        })
        .collect();
    Ok(PanelDataset::new(observations, MuMode::Known(0.0))?
        .with_covariate_names(dataset.covariate_names().to_vec()))
}

/// Pooled least-squares fit with an intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub intercept: f64,
    pub slopes: Vec<f64>,
}

/// Pooled OLS of outcomes on `[1, covariates]`, solved by QR.
pub fn pooled_ols(dataset: &PanelDataset) -> Result<OlsFit> {
    let k = dataset.num_covariates();
    if k == 0 {
        return Err(Error::validation("pooled OLS requires covariates"));
    }
    let n = dataset.len();
    if n < k + 1 {
        return Err(Error::Estimation(format!(
            "pooled OLS needs at least {} observations, got {n}",
            k + 1
        )));
    }
    let x = DMatrix::from_fn(n, k + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            dataset.observations()[i].covariates[j - 1]
        }
    });
    let y = DVector::from_iterator(n, dataset.observations().iter().map(|o| o.outcome));

    // Rank check on the scaled diagonal of R.
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..=k).map(|j| x.column(j).norm()).fold(0.0_f64, f64::max);
    let tol = scale * (n.max(k + 1) as f64) * f64::EPSILON * 16.0;
    for j in 0..=k {
        if r[(j, j)].abs() <= tol {
            return Err(Error::Estimation(format!(
                "rank-deficient design matrix (column {j} is collinear)"
            )));
        }
    }
    let qty = qr.q().transpose() * &y;
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Estimation("singular triangular factor".into()))?;
    Ok(OlsFit {
        intercept: coef[0],
        slopes: coef.iter().skip(1).copied().collect(),
    })
}

/// Replaces outcomes by first-stage residuals `y - x'β`.
///
/// With `beta = None` the coefficients come from [`pooled_ols`]; the
/// intercept is removed as well, so the residuals have pooled mean zero and
/// μ is set to `Known(0)`. A supplied `beta` is used verbatim (no intercept)
/// and the dataset's μ mode is kept.
pub fn residualize_panel(dataset: &PanelDataset, beta: Option<&[f64]>) -> Result<PanelDataset> {
    let k = dataset.num_covariates();
    if k == 0 && !dataset.is_empty() {
        return Err(Error::validation("residualization requires covariates on every observation"));
    }
    let (intercept, slopes, mu_mode) = match beta {
        Some(b) => {
            if b.len() != k {
                return Err(Error::validation(format!(
                    "beta has length {}, dataset has {k} covariates",
                    b.len()
                )));
            }
            (0.0, b.to_vec(), dataset.mu_mode())
        }
        None => {
            let fit = pooled_ols(dataset)?;
            (fit.intercept, fit.slopes, MuMode::Known(0.0))
        }
    };
    let observations = dataset
        .observations()
        .iter()
        .map(|o| {
            let fitted: f64 = intercept + o.covariates.iter().zip(&slopes).map(|(x, b)| x * b).sum::<f64>();
            Observation {
                outcome: o.outcome - fitted,
                ..o.clone()
            }
        })
        .collect();
    Ok(PanelDataset::new(observations, mu_mode)?.with_covariate_names(dataset.covariate_names().to_vec()))
}

/// One subject's outcome in a value-added design (e.g. a student of teacher `unit` in year `period`).
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectObservation {
    pub unit: String,
    pub period: i64,
    pub subject: String,
    pub outcome: f64,
    pub covariates: Vec<f64>,
}

/// Collapses subject-level data to unit-period residuals
/// `mean_j y_ijt - (mean_j x_ijt)'β`.
pub fn aggregate_value_added(raw: &[SubjectObservation], beta: &[f64]) -> Result<PanelDataset> {
    if raw.is_empty() {
        return Err(Error::validation("value-added input has no subjects"));
    }
    let mut cells: BTreeMap<(&str, i64), (f64, Vec<f64>, usize)> = BTreeMap::new();
    for s in raw {
        if s.covariates.len() != beta.len() {
            return Err(Error::validation(format!(
                "subject {} in ({}, {}) has {} covariates, beta has {}",
                s.subject,
                s.unit,
                s.period,
                s.covariates.len(),
                beta.len()
            )));
        }
        let cell = cells
            .entry((s.unit.as_str(), s.period))
            .or_insert_with(|| (0.0, vec![0.0; beta.len()], 0));
        cell.0 += s.outcome;
        for (acc, x) in cell.1.iter_mut().zip(&s.covariates) {
            *acc += x;
        }
        cell.2 += 1;
    }
    let observations = cells
        .into_iter()
        .map(|((unit, period), (ysum, xsum, n))| {
            let n = n as f64;
            let adjust: f64 = xsum.iter().zip(beta).map(|(x, b)| x / n * b).sum();
            Observation::new(unit, period, ysum / n - adjust)
        })
        .collect();
    PanelDataset::new(observations, MuMode::Pooled)
}

/// A contiguous block of `R` periods and the forecast origin that follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct RollingWindow {
    /// Last period inside the window.
    pub end: i64,
    /// Period being forecast from this window (`end + 1`).
    pub origin: i64,
    /// Units observed in every period of the window.
    pub data: PanelDataset,
}

/// Windows of `R` consecutive integer periods, one per feasible end period.
///
/// Units missing any period of a window are dropped from it; windows left
/// with no units are skipped. `R` beyond the panel's span yields no windows.
pub fn rolling_windows(dataset: &PanelDataset, window: usize) -> Result<Vec<RollingWindow>> {
    if window == 0 {
        return Err(Error::domain("rolling window length must be at least 1"));
    }
    let periods = dataset.periods();
    let Some(&first) = periods.first() else {
        return Ok(Vec::new());
    };
    let r = window as i64;
    let mut out = Vec::new();
    for &end in &periods {
        let start = end - r + 1;
        if start < first {
            continue;
        }
        let complete: BTreeSet<&str> = dataset
            .units()
            .filter(|(_, obs)| {
                let inside = obs.iter().filter(|o| o.period >= start && o.period <= end).count();
                inside == window
            })
            .map(|(u, _)| u)
            .collect();
        if complete.is_empty() {
            continue;
        }
        let data = dataset.filter(|o| o.period >= start && o.period <= end && complete.contains(o.unit.as_str()));
        out.push(RollingWindow {
            end,
            origin: end + 1,
            data,
        });
    }
    Ok(out)
}
