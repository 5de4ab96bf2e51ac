//! Small statistical helpers.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Standard normal quantile `Phi^{-1}(p)`.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level must lie in (0, 1), got {p}")));
    }
    Ok(Normal::standard().inverse_cdf(p))
}

/// Two-sided critical value for a `level` confidence interval.
pub fn two_sided_critical(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level must lie in (0, 1), got {level}")));
    }
    normal_quantile(1.0 - (1.0 - level) / 2.0)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation with the `n - 1` denominator.
pub fn sample_sd(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt()
}
