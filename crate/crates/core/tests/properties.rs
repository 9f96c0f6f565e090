use std::collections::BTreeMap;

use iwcast::evaluation::regret;
use iwcast::forecast::{combine, forecast_panel, iw_combine};
use iwcast::weights::{minimax_weight_from_bound, james_stein_weight, oracle_weight};
use iwcast::{Method, MuMode, Observation, OriginPolicy, PanelDataset, Series, Timing, TsVariant, WeightKind, WeightRule};
use proptest::prelude::*;

fn all_rules() -> Vec<WeightRule> {
    let current = [
        WeightKind::IwO,
        WeightKind::IwMr,
        WeightKind::IwMr2,
        WeightKind::IwMsfeIs,
        WeightKind::IwMsfeOos { p: 1, window: None },
        WeightKind::IwMsfeOos { p: 2, window: Some(2) },
    ];
    let mut rules: Vec<WeightRule> = current.into_iter().map(WeightRule::current).collect();
    rules.push(WeightRule::lagged(WeightKind::IwO));
    rules.push(WeightRule::lagged(WeightKind::IwMr));
    rules
}

/// Rules whose weight depends on the data only through ratios of squares.
fn scale_free_rules() -> Vec<WeightRule> {
    all_rules().into_iter().filter(|r| r.timing == Timing::Current).collect()
}

fn series(values: &[f64], mu: f64) -> Series {
    Series::from_values(values, mu).unwrap()
}

proptest! {
    #[test]
    fn weights_lie_in_unit_interval(
        values in prop::collection::vec(-1e6f64..1e6, 1..12),
        mu in -1e6f64..1e6,
    ) {
        let s = series(&values, mu);
        for rule in all_rules() {
            if values.len() < rule.min_len() {
                prop_assert!(rule.evaluate(&s).is_err());
                continue;
            }
            let w = rule.evaluate(&s).unwrap();
            prop_assert!((0.0..=1.0).contains(&w.w), "{} gave {}", rule.label(), w.w);
        }
    }

    #[test]
    fn degenerate_series_weights_are_valid(c in -10f64..10.0, len in 2usize..8, at_mu in any::<bool>()) {
        let mu = if at_mu { c } else { 0.0 };
        let s = series(&vec![c; len], mu);
        for rule in all_rules() {
            if len >= rule.min_len() {
                let w = rule.evaluate(&s).unwrap().w;
                prop_assert!((0.0..=1.0).contains(&w));
            }
        }
    }

    #[test]
    fn oracle_and_js_weights_lie_in_unit_interval(
        lambda2 in 0f64..1e6,
        sigma2 in 1e-9f64..1e6,
        t in 1usize..50,
    ) {
        for w in [oracle_weight(lambda2, sigma2, t).unwrap(), james_stein_weight(lambda2, sigma2, t).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&w));
        }
    }

    #[test]
    fn weights_are_scale_invariant(
        values in prop::collection::vec(-100f64..100.0, 4..10),
        scale in 0.01f64..100.0,
        negative in any::<bool>(),
    ) {
        let s = if negative { -scale } else { scale };
        let scaled: Vec<f64> = values.iter().map(|v| v * s).collect();
        for rule in scale_free_rules() {
            let a = rule.evaluate(&series(&values, 0.0)).unwrap().w;
            let b = rule.evaluate(&series(&scaled, 0.0)).unwrap().w;
            prop_assert!((a - b).abs() <= 1e-12, "{}: {} vs {}", rule.label(), a, b);
        }
    }

    #[test]
    fn weights_are_translation_invariant(
        values in prop::collection::vec(-10f64..10.0, 4..10),
        mu in -10f64..10.0,
        shift in -100f64..100.0,
    ) {
        let moved: Vec<f64> = values.iter().map(|v| v + shift).collect();
        for rule in all_rules() {
            let a = rule.evaluate(&series(&values, mu)).unwrap().w;
            let b = rule.evaluate(&series(&moved, mu + shift)).unwrap().w;
            prop_assert!((a - b).abs() <= 1e-9, "{}: {} vs {}", rule.label(), a, b);
        }
    }

    #[test]
    fn minimax_weight_is_strictly_increasing(a in 0f64..1e6, gap in 1e-6f64..10.0) {
        let b = a + gap * (1.0 + a);
        prop_assert!(minimax_weight_from_bound(a).unwrap() < minimax_weight_from_bound(b).unwrap());
    }

    #[test]
    fn combine_identities(ts in -1e6f64..1e6, pool in -1e6f64..1e6, w in 0f64..=1.0) {
        prop_assert_eq!(combine(&[(ts, 1.0), (pool, 0.0)]).unwrap(), ts);
        prop_assert_eq!(combine(&[(ts, 0.0), (pool, 1.0)]).unwrap(), pool);
        prop_assert_eq!(iw_combine(ts, pool, 1.0), ts);
        prop_assert_eq!(iw_combine(ts, pool, 0.0), pool);
        let v = iw_combine(ts, pool, w);
        prop_assert!(v >= ts.min(pool) && v <= ts.max(pool));
    }

    #[test]
    fn regret_is_nonnegative_and_shift_invariant(
        msfes in prop::collection::vec(0f64..100.0, 1..8),
        shift in -50f64..50.0,
    ) {
        let table: BTreeMap<String, f64> = msfes.iter().enumerate().map(|(i, v)| (format!("m{i}"), *v)).collect();
        let shifted: BTreeMap<String, f64> = table.iter().map(|(k, v)| (k.clone(), v + shift)).collect();
        let (r, rs) = (regret(&table), regret(&shifted));
        prop_assert!(r.values().all(|v| *v >= 0.0));
        prop_assert!(r.values().any(|v| *v == 0.0));
        for (k, v) in &r {
            prop_assert!((v - rs[k]).abs() <= 1e-9);
        }
    }

    #[test]
    fn iw_forecasts_lie_between_ts_and_pool(
        panel in (2usize..6, 3usize..6)
            .prop_flat_map(|(n, t)| prop::collection::vec(prop::collection::vec(-50f64..50.0, t), n)),
    ) {
        let observations = panel
            .iter()
            .enumerate()
            .flat_map(|(i, ys)| {
                ys.iter().enumerate().map(move |(t, y)| Observation::new(format!("u{i}"), t as i64, *y))
            })
            .collect();
        let dataset = PanelDataset::new(observations, MuMode::Pooled).unwrap();
        let methods = [
            Method::ts(TsVariant::Mean),
            Method::ts(TsVariant::Last),
            Method::Pool,
            Method::iw(WeightRule::iw_mr()),
            Method::iw(WeightRule::lagged(WeightKind::IwMr)),
            Method::Js,
        ];
        let records = forecast_panel(&dataset, &methods, OriginPolicy::Latest).unwrap();
        let again = forecast_panel(&dataset, &methods, OriginPolicy::Latest).unwrap();
        prop_assert_eq!(&records, &again);
        let value = |unit: &str, label: &str| {
            records.iter().find(|r| r.unit == unit && r.method == label).and_then(|r| r.value)
        };
        for i in 0..panel.len() {
            let unit = format!("u{i}");
            let pool = value(&unit, "Pool").unwrap();
            for (iw, ts) in [("IW-MR", "TS-mean"), ("IW-MR[lagged]", "TS-last"), ("JS", "TS-mean")] {
                let (v, t) = (value(&unit, iw).unwrap(), value(&unit, ts).unwrap());
                prop_assert!(v >= t.min(pool) - 1e-12 && v <= t.max(pool) + 1e-12);
            }
        }
    }
}
