use std::collections::BTreeMap;
use std::fs::{self, File};

use anyhow::{anyhow, Context, Result};
use iwcast::evaluation::{self, ScoredForecast};
use iwcast::forecast::{self, ForecastRecord};
use iwcast::panel::{load_panel, CsvSchema, MuMode, PanelDataset};
use iwcast::simulation::{self, ExperimentConfig};
use iwcast::{fmt_real, Method, OriginPolicy, Timing, TsVariant, WeightRule};
use serde_json::json;

use crate::output::Outputs;
use crate::{EvaluateArgs, ForecastArgs, PanelArgs, ReportArgs, SimulateArgs, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> iwcast::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn report_written(paths: &[std::path::PathBuf]) {
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
}

pub fn simulate(args: SimulateArgs) -> Result<()> {
    let (mut config, stem) = match (&args.config, args.preset) {
        (Some(path), _) => {
            if args.design.is_some() {
                return Err(usage("--design applies to --preset tyranny only"));
            }
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            let config = ExperimentConfig::from_toml_str(&text)
                .with_context(|| format!("invalid experiment file {}", path.display()))?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("custom").to_string();
            (config, stem)
        }
        (None, Some(preset)) => {
            let config = ExperimentConfig::preset(preset, args.design)?;
            let stem = match args.design {
                Some(d) => format!("{}-{}", preset.name(), d.name()),
                None => preset.name().to_string(),
            };
            (config, stem)
        }
        (None, None) => return Err(usage("either --preset or --config is required")),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(r) = args.replications {
        config.replications = r;
    }
    config.validate()?;
    eprintln!(
        "running {} ({} scenarios x {} replications, seed {})",
        stem,
        config.grid.as_ref().map_or(config.effects.len(), |g| g.len()),
        config.replications,
        config.seed
    );
    let result = simulation::run_experiment(&config)?;

    let mut out = Outputs::default();
    out.add(format!("{stem}_curves.csv"), csv_bytes(|b| result.write_curves_csv(b))?);
    out.add_json(format!("{stem}_summary.json"), &result.summary_json())?;
    if result.scatter.is_some() {
        out.add(format!("{stem}_scatter.csv"), csv_bytes(|b| result.write_scatter_csv(b))?);
    }
    for line in result.headline() {
        println!("{line}");
    }
    report_written(&out.commit(&args.out.output_dir)?);
    Ok(())
}

fn load(args: &PanelArgs) -> Result<PanelDataset> {
    let mut schema = CsvSchema::new(&args.unit_col, &args.period_col, &args.outcome_col);
    if let Some(g) = &args.group_col {
        schema = schema.with_group(g);
    }
    let file = File::open(&args.input).with_context(|| format!("cannot open {}", args.input.display()))?;
    let dataset = load_panel(file, &schema).with_context(|| format!("cannot load {}", args.input.display()))?;
    let mode = match (args.mu, args.demeaned, &args.group_col) {
        (Some(mu), _, _) => MuMode::Known(mu),
        (None, true, _) => MuMode::Known(0.0),
        (None, false, Some(_)) => MuMode::GroupPooled,
        (None, false, None) => MuMode::Pooled,
    };
    Ok(dataset.with_mu_mode(mode)?)
}

fn methods(args: &PanelArgs) -> Vec<Method> {
    let rules = if args.rules.is_empty() { vec![WeightRule::iw_mr()] } else { args.rules.clone() };
    let mut methods = vec![Method::ts(TsVariant::Mean)];
    if rules.iter().any(|r| r.timing == Timing::Lagged) {
        methods.push(Method::ts(TsVariant::Last));
    }
    methods.push(Method::Pool);
    for r in rules {
        let m = Method::iw(r);
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    if args.js {
        methods.push(Method::Js);
    }
    methods
}

pub fn forecast(args: ForecastArgs) -> Result<()> {
    let dataset = load(&args.panel)?;
    let methods = methods(&args.panel);
    if args.panel.window == Some(0) {
        return Err(usage("--window must be at least 1"));
    }
    let records = match (args.all_origins, args.panel.window) {
        (true, window) => forecast::forecast_panel(
            &dataset,
            &methods,
            OriginPolicy::AllOrigins { min_history: args.min_history, window },
        )?,
        (false, None) => forecast::forecast_panel(&dataset, &methods, OriginPolicy::Latest)?,
        (false, Some(window)) => {
            let last: BTreeMap<&str, i64> =
                dataset.units().map(|(u, obs)| (u, obs[obs.len() - 1].period)).collect();
            let policy = OriginPolicy::AllOrigins { min_history: 1, window: Some(window) };
            forecast::forecast_panel(&dataset, &methods, policy)?
                .into_iter()
                .filter(|r| last[r.unit.as_str()] == r.origin)
                .collect()
        }
    };
    let skipped = records.iter().filter(|r| r.skipped.is_some()).count();
    let mut out = Outputs::default();
    out.add("forecasts.csv", csv_bytes(|b| forecast::write_records(&records, b))?);
    println!(
        "{} forecasts for {} units ({} skipped)",
        records.len() - skipped,
        dataset.num_units(),
        skipped
    );
    report_written(&out.commit(&args.out.output_dir)?);
    Ok(())
}

fn decile_table(
    records: &[ForecastRecord],
    outcomes: &BTreeMap<(String, i64), f64>,
    methods: &[Method],
) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "decile", "forecasts", "mean_lagged_outcome", "mean_weight"])?;
    for m in methods.iter().filter(|m| matches!(m, Method::Iw { .. })) {
        let label = m.label();
        let mut rows: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.method == label)
            .filter_map(|r| Some((outcomes[&(r.unit.clone(), r.origin)], r.weight?.w)))
            .collect();
        if rows.is_empty() {
            continue;
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = rows.len();
        for d in 0..10 {
            let slice = &rows[d * n / 10..(d + 1) * n / 10];
            if slice.is_empty() {
                continue;
            }
            let k = slice.len() as f64;
            w.write_record([
                label.clone(),
                (d + 1).to_string(),
                slice.len().to_string(),
                fmt_real(slice.iter().map(|r| r.0).sum::<f64>() / k),
                fmt_real(slice.iter().map(|r| r.1).sum::<f64>() / k),
            ])?;
        }
    }
    w.into_inner().map_err(|e| anyhow!("{e}"))
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let dataset = load(&args.panel)?;
    let periods = dataset.periods();
    let min_history = args.min_history.max(1);
    if periods.len() < min_history + 1 {
        return Err(usage(format!(
            "the panel spans {} period(s); evaluation needs at least {} (a {}-period history and one target)",
            periods.len(),
            min_history + 1,
            min_history
        )));
    }
    if args.panel.window == Some(0) {
        return Err(usage("--window must be at least 1"));
    }
    let methods = methods(&args.panel);
    let policy = OriginPolicy::AllOrigins { min_history, window: args.panel.window };
    let realizations = evaluation::next_period_realizations(&dataset);
    let records: Vec<ForecastRecord> = forecast::forecast_panel(&dataset, &methods, policy)?
        .into_iter()
        .filter(|r| realizations.contains_key(&(r.unit.clone(), r.origin)))
        .collect();
    let scored = evaluation::score_records(&records, &realizations)?;
    if scored.is_empty() {
        return Err(usage("no forecast origin has a next-period realization"));
    }
    let group = evaluation::group_msfe(&scored)?;
    let per_unit = evaluation::unit_msfe(&scored);

    let mut units_per_method: BTreeMap<&str, usize> = BTreeMap::new();
    for (method, _) in per_unit.keys() {
        *units_per_method.entry(method.as_str()).or_default() += 1;
    }
    let mut forecasts_per_method: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &scored {
        *forecasts_per_method.entry(s.method.as_str()).or_default() += 1;
    }

    let labels: Vec<String> = methods.iter().map(Method::label).filter(|l| group.contains_key(l)).collect();
    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record(["method", "msfe", "units", "forecasts"])?;
    let mut json_methods = serde_json::Map::new();
    println!("{:<28} {:>12} {:>8} {:>10}", "method", "group MSFE", "units", "forecasts");
    for l in &labels {
        let (units, n) = (units_per_method[l.as_str()], forecasts_per_method[l.as_str()]);
        table.write_record([l.clone(), fmt_real(group[l]), units.to_string(), n.to_string()])?;
        json_methods.insert(l.clone(), json!({ "msfe": group[l], "units": units, "forecasts": n }));
        println!("{:<28} {:>12.6} {:>8} {:>10}", l, group[l], units, n);
    }
    let best = labels
        .iter()
        .min_by(|a, b| group[*a].total_cmp(&group[*b]))
        .expect("at least one method scored");

    let mut unit_table = csv::Writer::from_writer(Vec::new());
    unit_table.write_record(["method", "unit", "msfe", "forecasts"])?;
    for l in &labels {
        for ((m, u), (msfe, n)) in per_unit.range((l.clone(), String::new())..) {
            if m != l {
                break;
            }
            unit_table.write_record([m.clone(), u.clone(), fmt_real(*msfe), n.to_string()])?;
        }
    }

    let outcomes: BTreeMap<(String, i64), f64> =
        dataset.observations().iter().map(|o| ((o.unit.clone(), o.period), o.outcome)).collect();

    let mut out = Outputs::default();
    out.add("group_msfe.csv", table.into_inner().map_err(|e| anyhow!("{e}"))?);
    out.add_json(
        "group_msfe.json",
        &json!({
            "methods": json_methods,
            "best": best,
            "origins": { "min_history": min_history, "window": args.panel.window },
        }),
    )?;
    out.add("unit_msfe.csv", unit_table.into_inner().map_err(|e| anyhow!("{e}"))?);
    out.add("weight_deciles.csv", decile_table(&records, &outcomes, &methods)?);
    if methods.contains(&Method::Js) {
        out.add("delta_sfe.csv", delta_table(&scored, &methods)?);
    }
    report_written(&out.commit(&args.out.output_dir)?);
    Ok(())
}

fn delta_table(scored: &[ScoredForecast], methods: &[Method]) -> Result<Vec<u8>> {
    let js: BTreeMap<(&str, i64), f64> = scored
        .iter()
        .filter(|s| s.method == "JS")
        .map(|s| ((s.unit.as_str(), s.origin), s.sfe()))
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["unit", "origin", "method", "delta_sfe"])?;
    for m in methods.iter().filter(|m| matches!(m, Method::Iw { .. })) {
        let label = m.label();
        for s in scored.iter().filter(|s| s.method == label) {
            if let Some(j) = js.get(&(s.unit.as_str(), s.origin)) {
                w.write_record([s.unit.clone(), s.origin.to_string(), label.clone(), fmt_real(s.sfe() - j)])?;
            }
        }
    }
    w.into_inner().map_err(|e| anyhow!("{e}"))
}

pub fn report(args: ReportArgs) -> Result<()> {
    let file = File::open(&args.input).with_context(|| format!("cannot open {}", args.input.display()))?;
    let records = forecast::read_records(file).with_context(|| format!("cannot read {}", args.input.display()))?;
    let method = match &args.method {
        Some(m) => m.clone(),
        None => records
            .iter()
            .find(|r| r.method.starts_with("IW"))
            .map(|r| r.method.clone())
            .ok_or_else(|| usage("no IW forecasts in the input; choose one with --method"))?,
    };
    let mut latest: BTreeMap<&str, (i64, f64)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.method == method) {
        if let Some(v) = r.value {
            let e = latest.entry(r.unit.as_str()).or_insert((r.origin, v));
            if r.origin >= e.0 {
                *e = (r.origin, v);
            }
        }
    }
    if latest.is_empty() {
        return Err(usage(format!("no forecasts for method {method:?} in the input")));
    }
    let pool: BTreeMap<(&str, i64), f64> = records
        .iter()
        .filter(|r| r.method == "Pool")
        .filter_map(|r| Some(((r.unit.as_str(), r.origin), r.value?)))
        .collect();
    let (mut above, mut below) = (0usize, 0usize);
    for (unit, (origin, v)) in &latest {
        let mu = match args.mu {
            Some(mu) => mu,
            None => *pool
                .get(&(*unit, *origin))
                .ok_or_else(|| usage(format!("no Pool forecast for unit {unit} at origin {origin}; pass --mu")))?,
        };
        if *v > mu {
            above += 1;
        } else if *v < mu {
            below += 1;
        }
    }
    let values: Vec<f64> = latest.values().map(|(_, v)| *v).collect();
    let n = values.len() as f64;
    let gini_input: Vec<f64> = if args.shift_min {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        values.iter().map(|v| v - lo).collect()
    } else {
        values.clone()
    };
    let gini = evaluation::gini(&gini_input).context("Gini coefficient (try --shift-min for samples with a non-positive mean)")?;

    let mut out = Outputs::default();
    let (bandwidth, kde_error) = match evaluation::kde(&values, args.bandwidth) {
        Ok(curve) => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["x", "density"])?;
            for (x, f) in &curve.points {
                w.write_record([fmt_real(*x), fmt_real(*f)])?;
            }
            out.add("kde.csv", w.into_inner().map_err(|e| anyhow!("{e}"))?);
            (Some(curve.bandwidth), None)
        }
        Err(e) => {
            eprintln!("warning: no density estimate: {e}");
            (None, Some(e.to_string()))
        }
    };
    let summary = json!({
        "method": method,
        "units": values.len(),
        "gini": gini,
        "gini_shifted": args.shift_min,
        "share_above_mu": above as f64 / n,
        "share_below_mu": below as f64 / n,
        "kde_bandwidth": bandwidth,
        "kde_error": kde_error,
    });
    out.add_json("report.json", &summary)?;
    println!("method {method}: {} units, Gini {gini:.4}", values.len());
    println!("share above mu {:.4}, below mu {:.4}", above as f64 / n, below as f64 / n);
    report_written(&out.commit(&args.out.output_dir)?);
    Ok(())
}
