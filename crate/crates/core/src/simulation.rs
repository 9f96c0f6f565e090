//! Random variates and Monte Carlo experiments.
//!
//! Every experiment simulates units `Y_t = A + U_t` for `t = 1..T+1`, forms
//! each method's forecast of `Y_{T+1}` from `Y_1..Y_T` and scores it. The
//! random effect `A` is drawn first, then the shocks in time order, from a
//! ChaCha8 stream keyed by `(seed, preset, scenario)` with one stream per
//! replication. Results therefore do not depend on how replications are
//! scheduled across threads.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::evaluation::regret::finite_or_null;
use crate::evaluation::{
    batch_means_se, batch_ranges, crow_siddiqui, msfe_closed_form, pairwise_mean, pairwise_sum, MethodCurve,
    McEstimate, RegretPoint, RegretReport, ThetaGrid, ThetaPoint, BATCHES,
};
use crate::fmt_real;
use crate::forecast::{iw_combine, Method, TsVariant};
use crate::panel::Series;
use crate::weights::{Timing, WeightKind, WeightRule};

/// A symmetric distribution for random effects or shocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DistributionSpec {
    Normal { mean: f64, variance: f64 },
    /// Density `exp(-|x - location| / scale) / (2 scale)`; variance `2 scale²`.
    Laplace { location: f64, scale: f64 },
    /// Generalized double Pareto: density `θ/(2β) · (1 + |x|/β)^-(θ+1)`.
    ///
    /// Variance `2β² / ((θ-1)(θ-2))`; moments of order θ and above do not exist.
    DoublePareto { shape: f64, scale: f64 },
    /// Two-branch symmetric Pareto: density proportional to `(|x|/β)^(θ-1)`
    /// below β and `(β/|x|)^(θ+1)` above, with half the mass on each side of
    /// `|x| = β`. Variance `θ²β² / (θ² - 4)`.
    SymmetricPareto { shape: f64, scale: f64 },
}

impl DistributionSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |c: bool, msg: String| if c { Ok(()) } else { Err(Error::domain(msg)) };
        match *self {
            DistributionSpec::Normal { mean, variance } => ok(
                mean.is_finite() && variance.is_finite() && variance > 0.0,
                format!("normal needs finite mean and variance > 0, got ({mean}, {variance})"),
            ),
            DistributionSpec::Laplace { location, scale } => ok(
                location.is_finite() && scale.is_finite() && scale > 0.0,
                format!("Laplace needs finite location and scale > 0, got ({location}, {scale})"),
            ),
            DistributionSpec::DoublePareto { shape, scale } | DistributionSpec::SymmetricPareto { shape, scale } => ok(
                shape.is_finite() && scale.is_finite() && shape > 2.0 && scale > 0.0,
                format!("Pareto needs shape > 2 and scale > 0, got ({shape}, {scale})"),
            ),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            DistributionSpec::Normal { mean, .. } => mean,
            DistributionSpec::Laplace { location, .. } => location,
            DistributionSpec::DoublePareto { .. } | DistributionSpec::SymmetricPareto { .. } => 0.0,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            DistributionSpec::Normal { variance, .. } => variance,
            DistributionSpec::Laplace { scale, .. } => 2.0 * scale * scale,
            DistributionSpec::DoublePareto { shape, scale } => 2.0 * scale * scale / ((shape - 1.0) * (shape - 2.0)),
            DistributionSpec::SymmetricPareto { shape, scale } => shape * shape * scale * scale / (shape * shape - 4.0),
        }
    }

    /// Inverse CDF at `p ∈ (0, 1)`.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        self.validate()?;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!("probability must lie in (0, 1), got {p}")));
        }
        // symmetric families: work with the CDF of |x - center| at q = |2p - 1|
        let sign = if p < 0.5 { -1.0 } else { 1.0 };
        let q = (2.0 * p - 1.0).abs();
        Ok(match *self {
            DistributionSpec::Normal { mean, variance } => {
                Normal::new(mean, variance.sqrt()).map_err(|e| Error::domain(e.to_string()))?.inverse_cdf(p)
            }
            DistributionSpec::Laplace { location, scale } => location - sign * scale * (1.0 - q).ln(),
            DistributionSpec::DoublePareto { shape, scale } => sign * scale * ((1.0 - q).powf(-1.0 / shape) - 1.0),
            DistributionSpec::SymmetricPareto { shape, scale } => sign * symmetric_pareto_abs(shape, scale, q),
        })
    }

    /// Population Crow-Siddiqui kurtosis.
    pub fn crow_siddiqui(&self) -> Result<f64> {
        let q = |p| self.quantile(p).expect("validated");
        crate::evaluation::crow_siddiqui_from_quantile(q)
    }

    /// One draw; `self` must already be valid.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DistributionSpec::Normal { mean, variance } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + variance.sqrt() * z
            }
            DistributionSpec::Laplace { location, scale } => {
                let u: f64 = rng.sample(Open01);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                location - sign * scale * u.ln()
            }
            DistributionSpec::DoublePareto { shape, scale } => {
                let u: f64 = rng.sample(Open01);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * scale * (u.powf(-1.0 / shape) - 1.0)
            }
            DistributionSpec::SymmetricPareto { shape, scale } => {
                let u: f64 = rng.sample(Open01);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * symmetric_pareto_abs(shape, scale, u)
            }
        }
    }
}

fn symmetric_pareto_abs(shape: f64, scale: f64, q: f64) -> f64 {
    if q < 0.5 {
        scale * (2.0 * q).powf(1.0 / shape)
    } else {
        scale * (2.0 * (1.0 - q)).powf(-1.0 / shape)
    }
}

impl fmt::Display for DistributionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            DistributionSpec::Normal { mean, variance } => write!(f, "Normal({mean}, {variance})"),
            DistributionSpec::Laplace { location, scale } => write!(f, "Laplace({location}, {scale})"),
            DistributionSpec::DoublePareto { shape, scale } => write!(f, "DoublePareto({shape}, {scale})"),
            DistributionSpec::SymmetricPareto { shape, scale } => write!(f, "SymmetricPareto({shape}, {scale})"),
        }
    }
}

/// Validating draw.
pub fn sample<R: Rng + ?Sized>(dist: &DistributionSpec, rng: &mut R) -> Result<f64> {
    dist.validate()?;
    Ok(dist.draw(rng))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// The random stream for one replication.
pub fn stream_rng(seed: u64, tag: u64, index: u64, replication: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed);
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        state = splitmix64(state ^ [tag, index, 0x5EED, i as u64][i].rotate_left(17));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(replication);
    rng
}

/// Named experiment designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// TS-last, Pool and lagged IW-MR over 50 signal-to-noise ratios, T = 3.
    RegretCurve,
    /// The same design with double-Pareto effects of increasing tail weight.
    TailHeaviness,
    /// Current-timing weight rules at T = 2 over 50 ratios.
    WeightComparison,
    /// IW-MR against James-Stein at T = 3 for one effect distribution.
    Tyranny,
    Custom,
}

impl Preset {
    pub const NAMED: [Preset; 4] = [Preset::RegretCurve, Preset::TailHeaviness, Preset::WeightComparison, Preset::Tyranny];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::RegretCurve => "regret-curve",
            Preset::TailHeaviness => "tail-heaviness",
            Preset::WeightComparison => "weight-comparison",
            Preset::Tyranny => "tyranny",
            Preset::Custom => "custom",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Preset::RegretCurve => 1,
            Preset::TailHeaviness => 2,
            Preset::WeightComparison => 3,
            Preset::Tyranny => 4,
            Preset::Custom => 5,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        [Preset::RegretCurve, Preset::TailHeaviness, Preset::WeightComparison, Preset::Tyranny, Preset::Custom]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown preset {s:?}; valid presets: regret-curve, tail-heaviness, weight-comparison, tyranny, custom"
                ))
            })
    }
}

/// Effect distributions for the tyranny preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TyrannyDesign {
    /// Normal effects with variance 1.
    Normal1,
    /// Normal effects with variance 3.
    Normal3,
    /// Laplace(0, 1) effects, variance 2.
    Laplace,
    /// Double Pareto (θ = 3, β = 1) effects, variance 1.
    DoublePareto,
}

impl TyrannyDesign {
    pub const ALL: [TyrannyDesign; 4] =
        [TyrannyDesign::Normal1, TyrannyDesign::Normal3, TyrannyDesign::Laplace, TyrannyDesign::DoublePareto];

    pub fn name(&self) -> &'static str {
        match self {
            TyrannyDesign::Normal1 => "normal-1",
            TyrannyDesign::Normal3 => "normal-3",
            TyrannyDesign::Laplace => "laplace",
            TyrannyDesign::DoublePareto => "double-pareto",
        }
    }

    pub fn effect(&self) -> DistributionSpec {
        match self {
            TyrannyDesign::Normal1 => DistributionSpec::Normal { mean: 0.0, variance: 1.0 },
            TyrannyDesign::Normal3 => DistributionSpec::Normal { mean: 0.0, variance: 3.0 },
            TyrannyDesign::Laplace => DistributionSpec::Laplace { location: 0.0, scale: 1.0 },
            TyrannyDesign::DoublePareto => DistributionSpec::DoublePareto { shape: 3.0, scale: 1.0 },
        }
    }
}

impl FromStr for TyrannyDesign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        TyrannyDesign::ALL.into_iter().find(|d| d.name() == s).ok_or_else(|| {
            Error::config(format!("unknown design {s:?}; valid designs: normal-1, normal-3, laplace, double-pareto"))
        })
    }
}

/// The four double-Pareto `(θ, β)` pairs of the tail-heaviness preset, lightest tail last.
pub const TAIL_DESIGNS: [(f64, f64); 4] = [(2.3, 0.5), (3.0, 1.0), (5.0, 2.45), (50.0, 34.5)];

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Grid of points `(ratio · σ², σ²)`.
pub fn theta_grid_from_ratios(sigma2: f64, ratios: &[f64]) -> Result<ThetaGrid> {
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(Error::domain(format!("ratios must be positive, got {r}")));
    }
    let nu = ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    let points = ratios
        .iter()
        .map(|r| ThetaPoint::new(r * sigma2, sigma2))
        .collect::<Result<Vec<_>>>()?;
    ThetaGrid::new(nu, points)
}

/// 50 ratios evenly spaced on `[0.001, 2]` with σ² = 1.
pub fn default_ratio_grid() -> ThetaGrid {
    theta_grid_from_ratios(1.0, &linspace(0.001, 2.0, 50)).expect("fixed grid is valid")
}

/// A Monte Carlo experiment.
///
/// With `grid` set, each grid point is a scenario with Normal(0, λ²) effects
/// and Normal(0, σ²) shocks, and `effects`/`shock` are ignored. Otherwise
/// each entry of `effects` is a scenario paired with `shock`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// Observed periods; the target is period `t + 1`.
    pub t: usize,
    pub replications: usize,
    pub seed: u64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub effects: Vec<DistributionSpec>,
    pub shock: DistributionSpec,
    #[serde(default)]
    pub grid: Option<ThetaGrid>,
    pub methods: Vec<Method>,
    /// Emit `(A, ΔSFE)` pairs for the first IW method against JS.
    #[serde(default)]
    pub scatter: bool,
}

pub const DEFAULT_SEED: u64 = 1;

impl ExperimentConfig {
    /// A named preset with its default replications and seed.
    ///
    /// `design` selects the effect distribution of the tyranny preset and
    /// defaults to [`TyrannyDesign::Normal1`].
    pub fn preset(preset: Preset, design: Option<TyrannyDesign>) -> Result<Self> {
        let normal1 = DistributionSpec::Normal { mean: 0.0, variance: 1.0 };
        let regret_methods = vec![
            Method::ts(TsVariant::Last),
            Method::Pool,
            Method::iw(WeightRule::lagged(WeightKind::IwMr)),
        ];
        let base = |preset, t, replications| ExperimentConfig {
            preset,
            t,
            replications,
            seed: DEFAULT_SEED,
            mu: 0.0,
            effects: Vec::new(),
            shock: normal1,
            grid: None,
            methods: Vec::new(),
            scatter: false,
        };
        if design.is_some() && preset != Preset::Tyranny {
            return Err(Error::config("a design applies to the tyranny preset only"));
        }
        Ok(match preset {
            Preset::RegretCurve => ExperimentConfig {
                grid: Some(default_ratio_grid()),
                methods: regret_methods,
                ..base(preset, 3, 100_000)
            },
            Preset::TailHeaviness => ExperimentConfig {
                effects: TAIL_DESIGNS
                    .iter()
                    .map(|&(shape, scale)| DistributionSpec::DoublePareto { shape, scale })
                    .collect(),
                methods: regret_methods,
                ..base(preset, 3, 100_000)
            },
            Preset::WeightComparison => ExperimentConfig {
                grid: Some(default_ratio_grid()),
                methods: vec![
                    Method::iw(WeightRule::current(WeightKind::IwMr)),
                    Method::iw(WeightRule::current(WeightKind::IwO)),
                    Method::iw(WeightRule::current(WeightKind::IwMsfeIs)),
                    Method::iw(WeightRule::current(WeightKind::IwMsfeOos { p: 1, window: None })),
                ],
                ..base(preset, 2, 10_000)
            },
            Preset::Tyranny => ExperimentConfig {
                effects: vec![design.unwrap_or(TyrannyDesign::Normal1).effect()],
                methods: vec![Method::iw(WeightRule::iw_mr()), Method::Js],
                scatter: true,
                ..base(preset, 3, 10_000)
            },
            Preset::Custom => return Err(Error::config("the custom preset is defined by a config file")),
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Checks everything that can fail before sampling starts.
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::config("replications must be at least 1"));
        }
        if self.t < 2 {
            return Err(Error::config(format!("t must be at least 2, got {}", self.t)));
        }
        if !self.mu.is_finite() {
            return Err(Error::config("mu must be finite"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("no methods"));
        }
        for m in &self.methods {
            if let Method::Iw { rule } = m {
                rule.validate()?;
                let info = match rule.timing {
                    Timing::Current => self.t,
                    Timing::Lagged => self.t - 1,
                };
                if info < rule.min_len() {
                    return Err(Error::config(format!(
                        "{} needs {} observations in its information set but t = {} gives {info}",
                        rule.label(),
                        rule.min_len(),
                        self.t
                    )));
                }
            }
        }
        let mut labels: Vec<String> = self.methods.iter().map(Method::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("methods must be distinct"));
        }
        match &self.grid {
            Some(grid) => {
                if grid.points.iter().any(|p| p.lambda2 <= 0.0) {
                    return Err(Error::config("grid points need lambda2 > 0"));
                }
            }
            None => {
                if self.effects.is_empty() {
                    return Err(Error::config("need a grid or at least one effect distribution"));
                }
                for d in self.effects.iter().chain(std::iter::once(&self.shock)) {
                    d.validate().map_err(|e| Error::config(e.to_string()))?;
                }
            }
        }
        if self.scatter {
            let scenarios = self.grid.as_ref().map_or(self.effects.len(), |g| g.len());
            let has_iw = self.methods.iter().any(|m| matches!(m, Method::Iw { .. }));
            if scenarios != 1 || !has_iw || !self.methods.contains(&Method::Js) {
                return Err(Error::config("scatter needs exactly one scenario, an IW method and JS"));
            }
        }
        Ok(())
    }

    fn scenarios(&self) -> Vec<(DistributionSpec, DistributionSpec)> {
        match &self.grid {
            Some(grid) => grid
                .points
                .iter()
                .map(|p| {
                    (
                        DistributionSpec::Normal { mean: 0.0, variance: p.lambda2 },
                        DistributionSpec::Normal { mean: 0.0, variance: p.sigma2 },
                    )
                })
                .collect(),
            None => self.effects.iter().map(|&e| (e, self.shock)).collect(),
        }
    }
}

/// One method's results in one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// Simulated MSFE.
    pub msfe_mc: McEstimate,
    /// Exact MSFE where one exists (TS and Pool).
    pub closed_form: Option<f64>,
    /// Regret against the best method, using closed forms where available.
    pub regret: McEstimate,
}

impl MethodSummary {
    /// The MSFE used for regret: closed form if available, else simulated.
    pub fn msfe(&self) -> f64 {
        self.closed_form.unwrap_or(self.msfe_mc.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledEstimate {
    pub method: String,
    pub estimate: McEstimate,
}

/// Results for one effect/shock scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub theta: ThetaPoint,
    pub effect: DistributionSpec,
    pub shock: DistributionSpec,
    pub methods: Vec<MethodSummary>,
    /// Sample variance of the drawn effects.
    pub effect_variance: McEstimate,
    /// Sample Crow-Siddiqui kurtosis of the drawn effects.
    pub crow_siddiqui: McEstimate,
    /// `cov((A - μ)², (1 - W)²)` for each weighted method.
    pub assumption2: Vec<LabelledEstimate>,
    /// Mean `SFE(method) - SFE(JS)` for each IW method, when JS is present.
    pub delta_sfe: Vec<LabelledEstimate>,
}

impl ScenarioSummary {
    pub fn method(&self, label: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == label)
    }

    pub fn assumption2_for(&self, label: &str) -> Option<McEstimate> {
        self.assumption2.iter().find(|e| e.method == label).map(|e| e.estimate)
    }

    pub fn delta_sfe_for(&self, label: &str) -> Option<McEstimate> {
        self.delta_sfe.iter().find(|e| e.method == label).map(|e| e.estimate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub scenarios: Vec<ScenarioSummary>,
    pub regret: RegretReport,
    /// `(A, ΔSFE)` per replication.
    pub scatter: Option<Vec<(f64, f64)>>,
}

struct Rep {
    a: f64,
    sfe: Vec<f64>,
    w: Vec<f64>,
}

fn replicate(config: &ExperimentConfig, effect: &DistributionSpec, shock: &DistributionSpec, rng: &mut ChaCha8Rng) -> Rep {
    let t = config.t;
    let a = effect.draw(rng);
    let mut y: Vec<f64> = Vec::with_capacity(t + 1);
    for _ in 0..=t {
        y.push(a + shock.draw(rng));
    }
    let target = y[t];
    let observed = Series {
        unit: String::new(),
        values: y[..t].to_vec(),
        mu: config.mu,
    };
    let mean = observed.mean();
    let last = y[t - 1];
    let (lambda2, sigma2) = (effect.variance(), shock.variance());
    let mut sfe = Vec::with_capacity(config.methods.len());
    let mut w = Vec::with_capacity(config.methods.len());
    for m in &config.methods {
        let (forecast, weight) = match m {
            Method::Ts { variant: TsVariant::Mean } => (mean, f64::NAN),
            Method::Ts { variant: TsVariant::Last } => (last, f64::NAN),
            Method::Pool => (config.mu, f64::NAN),
            Method::Js => {
                let wj = lambda2 / (lambda2 + sigma2 / t as f64);
                (iw_combine(mean, config.mu, wj), wj)
            }
            Method::Iw { rule } => {
                let (ts, weight) = match rule.timing {
                    Timing::Current => (mean, rule.evaluate(&observed)),
                    Timing::Lagged => {
                        let info = Series {
                            unit: String::new(),
                            values: y[..t - 1].to_vec(),
                            mu: config.mu,
                        };
                        (last, rule.evaluate(&info))
                    }
                };
                let wi = weight.expect("rule preconditions checked by validate").w;
                (iw_combine(ts, config.mu, wi), wi)
            }
        };
        sfe.push((target - forecast).powi(2));
        w.push(weight);
    }
    Rep { a, sfe, w }
}

fn closed_form(config: &ExperimentConfig, method: &Method, theta: ThetaPoint, bias: f64) -> Option<f64> {
    let base = msfe_closed_form(method, theta, config.t).ok()?;
    Some(if *method == Method::Pool { base + bias * bias } else { base })
}

#[cfg(test)]
fn sample_variance(values: &[f64]) -> f64 {
    let m = pairwise_mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m).powi(2)).collect();
    pairwise_sum(&sq) / (values.len() as f64 - 1.0)
}

/// Count, means and centered cross-product sum of `(x, y)` pairs; batches
/// merge without revisiting the data.
#[derive(Debug, Clone, Copy)]
struct CoMoment {
    n: f64,
    mx: f64,
    my: f64,
    c: f64,
}

impl CoMoment {
    fn of(pairs: &[(f64, f64)]) -> Self {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let (mx, my) = (pairwise_mean(&xs), pairwise_mean(&ys));
        let prods: Vec<f64> = pairs.iter().map(|(x, y)| (x - mx) * (y - my)).collect();
        Self { n: pairs.len() as f64, mx, my, c: pairwise_sum(&prods) }
    }

    fn merge(parts: &[Self]) -> Self {
        let n: f64 = parts.iter().map(|p| p.n).sum();
        let mx = parts.iter().map(|p| p.n * p.mx).sum::<f64>() / n;
        let my = parts.iter().map(|p| p.n * p.my).sum::<f64>() / n;
        let c = parts.iter().map(|p| p.c + p.n * (p.mx - mx) * (p.my - my)).sum();
        Self { n, mx, my, c }
    }

    fn cov(&self) -> f64 {
        self.c / (self.n - 1.0)
    }
}

type Scatter = Vec<(f64, f64)>;

struct BatchStats {
    n: usize,
    /// Mean SFE per method.
    sfe: Vec<f64>,
    /// Mean `SFE_iw - SFE_js` per IW method.
    delta: Vec<f64>,
    /// `((A - μ)², (1 - W)²)` per weighted method, shifted by the first replication.
    cov: Vec<CoMoment>,
    /// `(A, A)`, shifted by the first replication.
    a: CoMoment,
}

struct Layout {
    weighted: Vec<usize>,
    iw: Vec<usize>,
    js: Option<usize>,
}

impl Layout {
    fn of(methods: &[Method]) -> Self {
        let pos = |f: fn(&Method) -> bool| methods.iter().enumerate().filter(|(_, m)| f(m)).map(|(k, _)| k).collect();
        Self {
            weighted: pos(|m| matches!(m, Method::Iw { .. } | Method::Js)),
            iw: pos(|m| matches!(m, Method::Iw { .. })),
            js: methods.iter().position(|m| *m == Method::Js),
        }
    }
}

fn column_mean(reps: &[Rep], f: impl Fn(&Rep) -> f64) -> f64 {
    pairwise_mean(&reps.iter().map(f).collect::<Vec<_>>())
}

struct Shift {
    a: f64,
    x: f64,
    y: Vec<f64>,
}

fn batch_stats(config: &ExperimentConfig, layout: &Layout, shift: &Shift, reps: &[Rep]) -> BatchStats {
    let sfe = (0..config.methods.len()).map(|k| column_mean(reps, |r| r.sfe[k])).collect();
    let delta = match layout.js {
        Some(j) => layout.iw.iter().map(|&k| column_mean(reps, |r| r.sfe[k] - r.sfe[j])).collect(),
        None => Vec::new(),
    };
    let cov = layout
        .weighted
        .iter()
        .zip(&shift.y)
        .map(|(&k, y0)| {
            let pairs: Vec<(f64, f64)> =
                reps.iter().map(|r| ((r.a - config.mu).powi(2) - shift.x, (1.0 - r.w[k]).powi(2) - y0)).collect();
            CoMoment::of(&pairs)
        })
        .collect();
    let a = CoMoment::of(&reps.iter().map(|r| (r.a - shift.a, r.a - shift.a)).collect::<Vec<_>>());
    BatchStats { n: reps.len(), sfe, delta, cov, a }
}

/// Simulates one scenario in [`BATCHES`] contiguous blocks, keeping only
/// per-block summaries, the effect draws and (if requested) the scatter rows.
fn run_scenario(
    config: &ExperimentConfig,
    index: usize,
    effect: DistributionSpec,
    shock: DistributionSpec,
) -> Result<(ScenarioSummary, Option<Scatter>)> {
    let n = config.replications;
    let layout = Layout::of(&config.methods);
    let mut shift: Option<Shift> = None;
    let mut a_draws = Vec::with_capacity(n);
    let mut scatter = config.scatter.then(|| Vec::with_capacity(n));
    let mut batches = Vec::new();
    for range in batch_ranges(n, BATCHES) {
        let reps: Vec<Rep> = (range.start as u64..range.end as u64)
            .into_par_iter()
            .map(|r| {
                let mut rng = stream_rng(config.seed, config.preset.tag(), index as u64, r);
                replicate(config, &effect, &shock, &mut rng)
            })
            .collect();
        let shift = shift.get_or_insert_with(|| {
            let first = &reps[0];
            Shift {
                a: first.a,
                x: (first.a - config.mu).powi(2),
                y: layout.weighted.iter().map(|&k| (1.0 - first.w[k]).powi(2)).collect(),
            }
        });
        batches.push(batch_stats(config, &layout, shift, &reps));
        a_draws.extend(reps.iter().map(|r| r.a));
        if let Some(rows) = scatter.as_mut() {
            let (iw, js) = (layout.iw[0], layout.js.expect("validated"));
            rows.extend(reps.iter().map(|r| (r.a, r.sfe[iw] - r.sfe[js])));
        }
    }

    let theta = ThetaPoint::new(effect.variance(), shock.variance())?;
    let bias = effect.mean() + shock.mean() - config.mu;
    let labels: Vec<String> = config.methods.iter().map(Method::label).collect();
    let se_of = |stats: Vec<f64>| if n >= 2 * BATCHES { batch_means_se(&stats) } else { f64::NAN };
    let pooled = |f: &dyn Fn(&BatchStats) -> f64| batches.iter().map(|b| b.n as f64 * f(b)).sum::<f64>() / n as f64;
    let estimate = |f: &dyn Fn(&BatchStats) -> f64| McEstimate {
        mean: pooled(f),
        se: se_of(batches.iter().map(f).collect()),
        n,
    };

    let closed: Vec<Option<f64>> = config.methods.iter().map(|m| closed_form(config, m, theta, bias)).collect();
    let msfe_mc: Vec<McEstimate> = (0..labels.len()).map(|k| estimate(&|b| b.sfe[k])).collect();
    let used: Vec<f64> = closed.iter().zip(&msfe_mc).map(|(c, mc)| c.unwrap_or(mc.mean)).collect();
    let best = (0..used.len()).fold(0, |b, k| if used[k] < used[b] { k } else { b });
    let effective = |k: usize, b: &BatchStats| closed[k].unwrap_or(b.sfe[k]);
    let methods = (0..labels.len())
        .map(|k| MethodSummary {
            method: labels[k].clone(),
            msfe_mc: msfe_mc[k],
            closed_form: closed[k],
            regret: McEstimate {
                mean: used[k] - used[best],
                se: se_of(batches.iter().map(|b| effective(k, b) - effective(best, b)).collect()),
                n,
            },
        })
        .collect();

    let a_parts: Vec<CoMoment> = batches.iter().map(|b| b.a).collect();
    let effect_variance = McEstimate {
        mean: CoMoment::merge(&a_parts).cov(),
        se: se_of(a_parts.iter().map(CoMoment::cov).collect()),
        n,
    };
    let crow = if n >= 4 {
        let full = crow_siddiqui(&a_draws).unwrap_or(f64::NAN);
        McEstimate::batched(n, full, |r| crow_siddiqui(&a_draws[r]).unwrap_or(f64::NAN))
    } else {
        McEstimate { mean: f64::NAN, se: f64::NAN, n }
    };

    let mut assumption2 = Vec::new();
    if n >= 2 {
        for (i, &k) in layout.weighted.iter().enumerate() {
            let parts: Vec<CoMoment> = batches.iter().map(|b| b.cov[i]).collect();
            assumption2.push(LabelledEstimate {
                method: labels[k].clone(),
                estimate: McEstimate {
                    mean: CoMoment::merge(&parts).cov(),
                    se: se_of(parts.iter().map(CoMoment::cov).collect()),
                    n,
                },
            });
        }
    }

    let delta_sfe = layout
        .iw
        .iter()
        .enumerate()
        .filter(|_| layout.js.is_some())
        .map(|(i, &k)| LabelledEstimate {
            method: labels[k].clone(),
            estimate: estimate(&|b| b.delta[i]),
        })
        .collect();

    let summary = ScenarioSummary {
        theta,
        effect,
        shock,
        methods,
        effect_variance,
        crow_siddiqui: crow,
        assumption2,
        delta_sfe,
    };
    Ok((summary, scatter))
}

/// Runs `config`. Output is identical for identical configs, whatever the
/// size of the rayon thread pool.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let mut scenarios = Vec::new();
    let mut scatter = None;
    for (index, (effect, shock)) in config.scenarios().into_iter().enumerate() {
        let (summary, rows) = run_scenario(config, index, effect, shock)?;
        if rows.is_some() {
            scatter = rows;
        }
        scenarios.push(summary);
    }
    let curves = config
        .methods
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let points = scenarios
                .iter()
                .map(|s| {
                    let ms = &s.methods[k];
                    RegretPoint {
                        theta: s.theta,
                        msfe: ms.msfe(),
                        msfe_se: if ms.closed_form.is_some() { 0.0 } else { ms.msfe_mc.se },
                        regret: ms.regret.mean,
                        regret_se: ms.regret.se,
                    }
                })
                .collect();
            MethodCurve::new(m.label(), points)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult {
        config: config.clone(),
        scenarios,
        regret: RegretReport { curves },
        scatter,
    })
}

fn est_json(e: &McEstimate) -> serde_json::Value {
    serde_json::json!({ "mean": finite_or_null(e.mean), "se": finite_or_null(e.se) })
}

impl ExperimentResult {
    /// One row per scenario per method.
    pub fn write_curves_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record([
            "scenario", "effect", "lambda2", "sigma2", "method", "msfe", "msfe_mc", "msfe_mc_se", "closed_form",
            "regret", "regret_se",
        ])?;
        for (i, s) in self.scenarios.iter().enumerate() {
            for m in &s.methods {
                w.write_record([
                    i.to_string(),
                    s.effect.to_string(),
                    fmt_real(s.theta.lambda2),
                    fmt_real(s.theta.sigma2),
                    m.method.clone(),
                    fmt_real(m.msfe()),
                    fmt_real(m.msfe_mc.mean),
                    fmt_real(m.msfe_mc.se),
                    m.closed_form.map(fmt_real).unwrap_or_default(),
                    fmt_real(m.regret.mean),
                    fmt_real(m.regret.se),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Two columns, `a` and `delta_sfe`.
    pub fn write_scatter_csv<W: Write>(&self, sink: W) -> Result<()> {
        let rows = self
            .scatter
            .as_ref()
            .ok_or_else(|| Error::config("this experiment has no scatter output"))?;
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["a", "delta_sfe"])?;
        for (a, d) in rows {
            w.write_record([fmt_real(*a), fmt_real(*d)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let scenarios: Vec<serde_json::Value> = self
            .scenarios
            .iter()
            .map(|s| {
                let labelled = |v: &[LabelledEstimate]| -> serde_json::Value {
                    v.iter().map(|e| (e.method.clone(), est_json(&e.estimate))).collect::<serde_json::Map<_, _>>().into()
                };
                serde_json::json!({
                    "effect": s.effect.to_string(),
                    "lambda2": s.theta.lambda2,
                    "sigma2": s.theta.sigma2,
                    "effect_variance": est_json(&s.effect_variance),
                    "crow_siddiqui": est_json(&s.crow_siddiqui),
                    "assumption2_cov": labelled(&s.assumption2),
                    "mean_delta_sfe": labelled(&s.delta_sfe),
                    "msfe": s.methods.iter().map(|m| (m.method.clone(), serde_json::json!({
                        "value": m.msfe(),
                        "mc": est_json(&m.msfe_mc),
                        "closed_form": m.closed_form,
                    }))).collect::<serde_json::Map<_, _>>(),
                })
            })
            .collect();
        serde_json::json!({
            "preset": self.config.preset.name(),
            "t": self.config.t,
            "replications": self.config.replications,
            "seed": self.config.seed,
            "mu": self.config.mu,
            "methods": self.config.methods.iter().map(Method::label).collect::<Vec<_>>(),
            "max_regret": self.regret.summary_json(),
            "scenarios": scenarios,
        })
    }

    /// Short human-readable lines with the headline numbers.
    pub fn headline(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for c in &self.regret.curves {
            lines.push(format!(
                "max regret {:<24} {:.4} (se {:.4}) at lambda2 = {:.4}",
                c.method, c.max_regret, c.max_regret_se, c.argmax.lambda2
            ));
        }
        for s in &self.scenarios {
            for d in &s.delta_sfe {
                lines.push(format!(
                    "{}: mean dSFE {} vs JS = {:.4} (se {:.4})",
                    s.effect, d.method, d.estimate.mean, d.estimate.se
                ));
            }
            if self.config.preset == Preset::TailHeaviness {
                for e in &s.assumption2 {
                    lines.push(format!(
                        "{}: CS kurtosis {:.3}, var(A) {:.3}, cov {} = {:.4} (se {:.4})",
                        s.effect, s.crow_siddiqui.mean, s.effect_variance.mean, e.method, e.estimate.mean, e.estimate.se
                    ));
                }
            }
        }
        lines
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn draws(dist: DistributionSpec, n: u64, seed: u64) -> Vec<f64> {
        (0..n)
            .into_par_iter()
            .map(|r| dist.draw(&mut stream_rng(seed, 99, 0, r)))
            .collect()
    }

    #[test]
    fn laplace_variance() {
        let x = draws(DistributionSpec::Laplace { location: 0.0, scale: 1.0 }, 1_000_000, 11);
        assert!((sample_variance(&x) - 2.0).abs() < 0.02);
    }

    #[test]
    fn normal_sd() {
        let x = draws(DistributionSpec::Normal { mean: 0.0, variance: 9.0 }, 1_000_000, 12);
        assert!((sample_variance(&x).sqrt() - 3.0).abs() < 0.02);
    }

    #[test]
    fn symmetric_pareto_median_abs_is_scale() {
        let beta = 1.7;
        let x = draws(DistributionSpec::SymmetricPareto { shape: 3.0, scale: beta }, 200_000, 13);
        let mut abs: Vec<f64> = x.iter().map(|v| v.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let median = abs[abs.len() / 2];
        // density of |x| at β is θ/β; sd of the sample median ≈ 1/(2 f √n)
        let se = 1.0 / (2.0 * 3.0 / beta * (abs.len() as f64).sqrt());
        assert!((median - beta).abs() < 4.0 * se, "median {median}");
    }

    #[test]
    fn double_pareto_quantiles_match_draws() {
        let d = DistributionSpec::DoublePareto { shape: 3.0, scale: 1.0 };
        let x = draws(d, 200_000, 14);
        let below = x.iter().filter(|&&v| v <= d.quantile(0.9).unwrap()).count() as f64 / x.len() as f64;
        assert!((below - 0.9).abs() < 0.005);
        assert_relative_eq!(d.quantile(0.5).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn population_crow_siddiqui_of_tail_designs() {
        let cs: Vec<f64> = TAIL_DESIGNS
            .iter()
            .map(|&(shape, scale)| DistributionSpec::DoublePareto { shape, scale }.crow_siddiqui().unwrap())
            .collect();
        for (c, shape) in cs.iter().zip(TAIL_DESIGNS.map(|d| d.0)) {
            let exact = (20f64.powf(1.0 / shape) - 1.0) / (2f64.powf(1.0 / shape) - 1.0);
            assert_relative_eq!(*c, exact, epsilon = 1e-9);
        }
        assert!(cs.windows(2).all(|w| w[0] > w[1]));
        let laplace = DistributionSpec::Laplace { location: 0.0, scale: 1.0 }.crow_siddiqui().unwrap();
        assert_relative_eq!(laplace, 20f64.ln() / 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn invalid_specs() {
        let mut rng = stream_rng(0, 0, 0, 0);
        assert!(sample(&DistributionSpec::Normal { mean: 0.0, variance: 0.0 }, &mut rng).is_err());
        assert!(sample(&DistributionSpec::Laplace { location: 0.0, scale: -1.0 }, &mut rng).is_err());
        assert!(sample(&DistributionSpec::DoublePareto { shape: 2.0, scale: 1.0 }, &mut rng).is_err());
    }

    #[test]
    fn grid_from_ratios() {
        let g = theta_grid_from_ratios(1.0, &[1.0]).unwrap();
        assert_eq!(g.points, vec![ThetaPoint { lambda2: 1.0, sigma2: 1.0 }]);
        let g = default_ratio_grid();
        assert_eq!(g.len(), 50);
        assert_eq!(g.points[0].lambda2, 0.001);
        assert_eq!(g.points[49].lambda2, 2.0);
        assert_eq!(theta_grid_from_ratios(2.0, &[0.5]).unwrap().points[0].lambda2, 1.0);
        assert!(theta_grid_from_ratios(1.0, &[0.0]).is_err());
    }

    #[test]
    fn presets_validate() {
        for p in Preset::NAMED {
            ExperimentConfig::preset(p, None).unwrap().validate().unwrap();
        }
        assert!(ExperimentConfig::preset(Preset::RegretCurve, Some(TyrannyDesign::Laplace)).is_err());
        assert!("nope".parse::<Preset>().unwrap_err().to_string().contains("regret-curve"));
    }

    #[test]
    fn config_errors_before_sampling() {
        let mut c = ExperimentConfig::preset(Preset::RegretCurve, None).unwrap();
        c.t = 2;
        assert!(matches!(run_experiment(&c), Err(Error::Config(_))));
        c.t = 3;
        c.replications = 0;
        assert!(run_experiment(&c).is_err());
    }

    #[test]
    fn toml_round_trip() {
        for p in Preset::NAMED {
            let c = ExperimentConfig::preset(p, None).unwrap();
            let text = c.to_toml_string().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
        }
    }

    #[test]
    fn determinism_and_bytes() {
        let mut c = ExperimentConfig::preset(Preset::Tyranny, Some(TyrannyDesign::Laplace)).unwrap();
        c.replications = 1;
        let out = |c: &ExperimentConfig| {
            let r = run_experiment(c).unwrap();
            let mut buf = Vec::new();
            r.write_curves_csv(&mut buf).unwrap();
            r.write_scatter_csv(&mut buf).unwrap();
            buf.extend(serde_json::to_vec(&r.summary_json()).unwrap());
            buf
        };
        assert_eq!(out(&c), out(&c));
        c.replications = 500;
        assert_eq!(out(&c), out(&c));
    }

    #[test]
    fn js_weight_in_simulation_matches_formula() {
        let mut c = ExperimentConfig::preset(Preset::Tyranny, Some(TyrannyDesign::Normal3)).unwrap();
        c.replications = 50;
        let r = run_experiment(&c).unwrap();
        // JS weight is constant, so its Assumption-2 covariance is exactly zero
        assert_eq!(r.scenarios[0].assumption2_for("JS").unwrap().mean, 0.0);
    }
}
