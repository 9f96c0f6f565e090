//! Distribution summaries for simulated draws and forecast cross-sections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_finite(sample: &[f64]) -> Result<()> {
    if sample.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("sample contains non-finite values"));
    }
    Ok(())
}

fn sorted(sample: &[f64]) -> Vec<f64> {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Linear-interpolation ("type 7") quantile of an ascending sample.
pub fn quantile(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::domain("quantile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("probability must lie in [0, 1], got {p}")));
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Crow-Siddiqui kurtosis `(Q.975 - Q.025) / (Q.75 - Q.25)`.
///
/// About 2.91 for the normal; larger values mean heavier tails.
pub fn crow_siddiqui(sample: &[f64]) -> Result<f64> {
    if sample.len() < 4 {
        return Err(Error::domain(format!("Crow-Siddiqui needs at least 4 values, got {}", sample.len())));
    }
    check_finite(sample)?;
    let s = sorted(sample);
    crow_siddiqui_from_quantile(|p| quantile(&s, p).expect("p is in range"))
}

/// Crow-Siddiqui kurtosis from a quantile function.
pub fn crow_siddiqui_from_quantile(q: impl Fn(f64) -> f64) -> Result<f64> {
    let iqr = q(0.75) - q(0.25);
    if !(iqr > 0.0) {
        return Err(Error::domain("interquartile range is zero"));
    }
    Ok((q(0.975) - q(0.025)) / iqr)
}

/// Gini coefficient: mean absolute difference over twice the mean.
///
/// Computed on the values as given. A sample with no dispersion returns 0;
/// otherwise the mean must be positive (shift the sample first if needed).
pub fn gini(sample: &[f64]) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::domain("Gini of an empty sample"));
    }
    check_finite(sample)?;
    let s = sorted(sample);
    let n = s.len() as f64;
    // Σ_i Σ_j |x_i - x_j| = 2 Σ_i (2i - n - 1) x_(i)
    let abs_diff: f64 = 2.0 * s.iter().enumerate().map(|(i, x)| (2.0 * (i + 1) as f64 - n - 1.0) * x).sum::<f64>();
    if abs_diff == 0.0 {
        return Ok(0.0);
    }
    let mean = s.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(Error::domain(format!("Gini needs a positive mean, got {mean}")));
    }
    Ok(abs_diff / (2.0 * n * n * mean))
}

fn sample_sd(sample: &[f64]) -> f64 {
    let n = sample.len() as f64;
    let m = sample.iter().sum::<f64>() / n;
    (sample.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Silverman's rule `0.9 · min(sd, IQR/1.34) · n^(-1/5)`, falling back to
/// the sd alone when the IQR is zero.
pub fn silverman_bandwidth(sample: &[f64]) -> Result<f64> {
    if sample.len() < 2 {
        return Err(Error::domain("bandwidth needs at least 2 values"));
    }
    check_finite(sample)?;
    let sd = sample_sd(sample);
    if !(sd > 0.0) {
        return Err(Error::domain("sample has zero spread"));
    }
    let s = sorted(sample);
    let iqr = quantile(&s, 0.75)? - quantile(&s, 0.25)?;
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * (sample.len() as f64).powf(-0.2))
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Gaussian kernel density estimate at `x`.
pub fn kde_density(sample: &[f64], bandwidth: f64, x: f64) -> f64 {
    let n = sample.len() as f64;
    sample.iter().map(|xi| std_normal_pdf((x - xi) / bandwidth)).sum::<f64>() / (n * bandwidth)
}

/// A density evaluated on an even grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub bandwidth: f64,
    pub points: Vec<(f64, f64)>,
}

impl KdeCurve {
    /// Trapezoid-rule integral over the grid.
    pub fn integral(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
            .sum()
    }
}

pub const KDE_GRID_POINTS: usize = 512;

/// Gaussian KDE on 512 points spanning `[min - 3h, max + 3h]`.
pub fn kde(sample: &[f64], bandwidth: Option<f64>) -> Result<KdeCurve> {
    if sample.len() < 2 {
        return Err(Error::domain("KDE needs at least 2 values"));
    }
    check_finite(sample)?;
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => {
            if !(sample_sd(sample) > 0.0) {
                return Err(Error::domain("sample has zero spread"));
            }
            h
        }
        Some(h) => return Err(Error::domain(format!("bandwidth must be positive, got {h}"))),
        None => silverman_bandwidth(sample)?,
    };
    let lo = sample.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = sample.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let points = (0..KDE_GRID_POINTS)
        .map(|i| {
            let x = lo + step * i as f64;
            (x, kde_density(sample, h, x))
        })
        .collect();
    Ok(KdeCurve { bandwidth: h, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn type7_quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&s, 1.0).unwrap(), 4.0);
        assert_eq!(quantile(&s, 0.5).unwrap(), 2.5);
        assert_relative_eq!(quantile(&s, 0.25).unwrap(), 1.75, epsilon = 1e-15);
        assert!(quantile(&[], 0.5).is_err());
    }

    #[test]
    fn crow_siddiqui_examples() {
        assert_relative_eq!(crow_siddiqui_from_quantile(|p| p).unwrap(), 1.9, epsilon = 1e-12);
        let n = Normal::new(0.0, 1.0).unwrap();
        let cs = crow_siddiqui_from_quantile(|p| n.inverse_cdf(p)).unwrap();
        assert_relative_eq!(cs, 2.906, epsilon = 1e-3);
        // 1001-point uniform grid has exact type-7 quantiles
        let grid: Vec<f64> = (0..=1000).map(|i| f64::from(i) / 1000.0).collect();
        assert_relative_eq!(crow_siddiqui(&grid).unwrap(), 1.9, epsilon = 1e-12);
        assert!(crow_siddiqui(&[1.0, 1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(crow_siddiqui(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[3.0; 5]).unwrap(), 0.0);
        assert_eq!(gini(&[0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(gini(&[-2.0; 3]).unwrap(), 0.0);
        assert!(gini(&[-1.0, 1.0]).is_err());
        assert!(gini(&[]).is_err());
        // brute force
        let s: [f64; 5] = [0.3, 4.0, 1.5, 2.2, 0.0];
        let n = s.len() as f64;
        let brute: f64 = s.iter().flat_map(|a| s.iter().map(move |b| (a - b).abs())).sum::<f64>()
            / (2.0 * n * n * (s.iter().sum::<f64>() / n));
        assert_relative_eq!(gini(&s).unwrap(), brute, epsilon = 1e-14);
    }

    #[test]
    fn kde_examples() {
        let two = [-1.0, 1.0];
        assert_relative_eq!(kde_density(&two, 1.0, 0.0), 0.241_970_724_519_143_37, epsilon = 1e-15);

        let sample: Vec<f64> = (-50..=50).map(|i| f64::from(i).powi(3) / 1e4).collect();
        let curve = kde(&sample, None).unwrap();
        assert!((curve.integral() - 1.0).abs() < 1e-3);
        let n = curve.points.len();
        for i in 0..n / 2 {
            assert!((curve.points[i].1 - curve.points[n - 1 - i].1).abs() < 1e-9);
        }
        assert!(kde(&[2.0, 2.0, 2.0], None).is_err());
        assert!(kde(&[2.0, 2.0], Some(1.0)).is_err());
        assert!(kde(&[1.0, 2.0], Some(0.0)).is_err());
    }
}
