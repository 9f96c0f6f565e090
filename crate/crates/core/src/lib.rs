//! Individual-weighting forecasts for short panels.
//!
//! Each unit's forecast is a convex combination of its own time-series
//! forecast and a common pooled forecast μ, with a weight computed from the
//! unit's own history:
//!
//! ```
//! use iwcast::{weights::WeightRule, Series};
//!
//! let series = Series::from_values(&[1.0, 2.0, 3.0], 0.0).unwrap();
//! let w = WeightRule::iw_mr().evaluate(&series).unwrap().w;
//! assert!((w - (1.0 - 1.0 / 55f64.sqrt())).abs() < 1e-15);
//! ```
//!
//! Modules:
//! * [`panel`]: CSV ingestion, shrink points and first-stage transforms.
//! * [`weights`]: the weight rules.
//! * [`forecast`]: TS, Pool, IW and JS forecasts per unit and origin.
//! * [`evaluation`]: MSFE, regret, ΔSFE and distribution summaries.
//! * [`simulation`]: random variates and the Monte Carlo experiments.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluation;
pub mod forecast;
pub mod panel;
pub mod simulation;
pub mod weights;

pub use error::{Error, Result};
pub use evaluation::{McEstimate, RegretReport, ThetaGrid, ThetaPoint};
pub use forecast::{ForecastRecord, Method, OriginPolicy, TsVariant};
pub use panel::{CsvSchema, MuMode, Observation, PanelDataset, Series};
pub use simulation::{DistributionSpec, ExperimentConfig, ExperimentResult, Preset};
pub use weights::{Timing, WeightKind, WeightResult, WeightRule};

/// Formats a real for the text outputs: shortest representation that
/// round-trips exactly, so files are byte-stable and lossless.
pub fn fmt_real(x: f64) -> String {
    if x.is_finite() {
        format!("{x:?}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}
