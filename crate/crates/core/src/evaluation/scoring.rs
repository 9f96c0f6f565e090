//! Out-of-sample scoring of forecast records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::ForecastRecord;
use crate::panel::PanelDataset;

/// A forecast matched to the outcome it targeted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredForecast {
    pub unit: String,
    pub origin: i64,
    pub method: String,
    pub forecast: f64,
    pub realization: f64,
}

impl ScoredForecast {
    pub fn sfe(&self) -> f64 {
        (self.realization - self.forecast).powi(2)
    }
}

/// Maps `(unit, origin)` to the unit's outcome at period `origin + 1`.
pub fn next_period_realizations(dataset: &PanelDataset) -> BTreeMap<(String, i64), f64> {
    dataset
        .observations()
        .iter()
        .map(|o| ((o.unit.clone(), o.period - 1), o.outcome))
        .collect()
}

/// Joins non-skipped records to their realizations; a record without one is an error.
pub fn score_records(
    records: &[ForecastRecord],
    realizations: &BTreeMap<(String, i64), f64>,
) -> Result<Vec<ScoredForecast>> {
    records
        .iter()
        .filter_map(|r| r.value.map(|v| (r, v)))
        .map(|(r, forecast)| {
            let realization = realizations.get(&(r.unit.clone(), r.origin)).copied().ok_or_else(|| {
                Error::domain(format!("no realization for unit {} after origin {}", r.unit, r.origin))
            })?;
            Ok(ScoredForecast {
                unit: r.unit.clone(),
                origin: r.origin,
                method: r.method.clone(),
                forecast,
                realization,
            })
        })
        .collect()
}

/// Per `(method, unit)` mean squared error and number of forecasts.
pub fn unit_msfe(scored: &[ScoredForecast]) -> BTreeMap<(String, String), (f64, usize)> {
    let mut acc: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for s in scored {
        let e = acc.entry((s.method.clone(), s.unit.clone())).or_insert((0.0, 0));
        e.0 += s.sfe();
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (sum, n))| (k, (sum / n as f64, n))).collect()
}

/// Per method, the average over units of each unit's MSFE.
pub fn group_msfe(scored: &[ScoredForecast]) -> Result<BTreeMap<String, f64>> {
    if scored.is_empty() {
        return Err(Error::domain("no scored forecasts"));
    }
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for ((method, _), (msfe, _)) in unit_msfe(scored) {
        let e = acc.entry(method).or_insert((0.0, 0));
        e.0 += msfe;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(m, (sum, n))| (m, sum / n as f64)).collect())
}

/// Elementwise `SFE(IW) - SFE(JS)`; negative entries favour IW.
pub fn delta_sfe(iw_errors: &[f64], js_errors: &[f64]) -> Result<Vec<f64>> {
    if iw_errors.len() != js_errors.len() {
        return Err(Error::domain(format!(
            "error vectors differ in length: {} vs {}",
            iw_errors.len(),
            js_errors.len()
        )));
    }
    Ok(iw_errors.iter().zip(js_errors).map(|(a, b)| a - b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::msfe_empirical;

    fn rec(unit: &str, origin: i64, method: &str, value: f64) -> ForecastRecord {
        ForecastRecord {
            unit: unit.into(),
            origin,
            method: method.into(),
            value: Some(value),
            weight: None,
            skipped: None,
        }
    }

    #[test]
    fn group_msfe_examples() {
        let realized: BTreeMap<(String, i64), f64> =
            [(("a".to_string(), 1), 1.0), (("a".to_string(), 2), -1.0), (("b".to_string(), 1), 3.0)].into();
        let single = score_records(&[rec("a", 1, "m", 0.0), rec("a", 2, "m", 0.0)], &realized).unwrap();
        let pairs: Vec<(f64, f64)> = single.iter().map(|s| (s.forecast, s.realization)).collect();
        assert_eq!(group_msfe(&single).unwrap()["m"], msfe_empirical(&pairs).unwrap());

        // per-unit MSFEs 1 and 3
        let two = score_records(&[rec("a", 1, "m", 0.0), rec("b", 1, "m", 3.0 - 3f64.sqrt())], &realized).unwrap();
        approx::assert_relative_eq!(group_msfe(&two).unwrap()["m"], 2.0, epsilon = 1e-12);

        let perfect = score_records(&[rec("a", 1, "m", 1.0), rec("b", 1, "m", 3.0)], &realized).unwrap();
        assert_eq!(group_msfe(&perfect).unwrap()["m"], 0.0);

        assert!(score_records(&[rec("c", 1, "m", 0.0)], &realized).is_err());
    }

    #[test]
    fn realizations_are_next_period() {
        use crate::panel::{MuMode, Observation};
        let ds = PanelDataset::new(
            vec![Observation::new("a", 1, 5.0), Observation::new("a", 2, 7.0)],
            MuMode::Pooled,
        )
        .unwrap();
        let r = next_period_realizations(&ds);
        assert_eq!(r[&("a".to_string(), 1)], 7.0);
    }

    #[test]
    fn delta_sfe_examples() {
        assert_eq!(delta_sfe(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(delta_sfe(&[1.0], &[4.0]).unwrap(), vec![-3.0]);
        assert!(delta_sfe(&[1.0], &[]).is_err());
    }
}
