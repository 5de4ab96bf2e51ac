//! Importance-sampling ratios and off-policy value estimates.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{log_prob_from_linear, MaskedPolicy, PolicyParams};
use crate::trajectories::Dataset;

/// Largest tolerated spread of log-ratios before the weights are unusable.
pub const MAX_LOG_RATIO_SPREAD: f64 = 700.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ISRatios {
    /// `sum_t [log pi_{beta,b}(A_t|S_t) - log pi_b(A_t|S_t)]` per trajectory.
    pub log_ratios: Vec<f64>,
    /// Undiscounted return per trajectory.
    pub returns: Vec<f64>,
    /// `E_n r`.
    pub mean_ratio: f64,
}

impl ISRatios {
    pub fn n(&self) -> usize {
        self.log_ratios.len()
    }

    pub fn max_log_ratio(&self) -> f64 {
        self.log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn spread(&self) -> f64 {
        let min = self.log_ratios.iter().copied().fold(f64::INFINITY, f64::min);
        self.max_log_ratio() - min
    }

    /// Ratios rescaled by `exp(-max log-ratio)`, so the largest is exactly 1.
    pub fn scaled_weights(&self) -> Vec<f64> {
        let m = self.max_log_ratio();
        self.log_ratios.iter().map(|l| (l - m).exp()).collect()
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.log_ratios.iter().map(|l| l.exp()).collect()
    }

    pub fn check_weights(&self) -> Result<()> {
        let spread = self.spread();
        if !spread.is_finite() || spread > MAX_LOG_RATIO_SPREAD {
            return Err(Error::DegenerateWeights { spread, limit: MAX_LOG_RATIO_SPREAD });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    /// Self-normalized estimate `V_n`.
    pub v_weighted: f64,
    /// Plain importance-sampling estimate, `mean(r_i G_i)`.
    pub v_unweighted: f64,
    /// Estimated sd of `sqrt(n) V_n`.
    pub sd_weighted: f64,
    pub n: usize,
}

impl ValueEstimate {
    /// Standard error of `V_n`.
    pub fn se(&self) -> f64 {
        self.sd_weighted / (self.n as f64).sqrt()
    }
}

fn check_dims(p: &MaskedPolicy, b: &PolicyParams, d: &Dataset) -> Result<()> {
    if p.dim() != d.dim() {
        return Err(Error::Dimension { expected: d.dim(), found: p.dim() });
    }
    if b.dim() != d.dim() {
        return Err(Error::Dimension { expected: d.dim(), found: b.dim() });
    }
    Ok(())
}

pub(crate) fn log_ratio(p: &MaskedPolicy, b: &DVector<f64>, tr: &crate::trajectories::Trajectory) -> f64 {
    tr.decisions()
        .map(|(s, a)| log_prob_from_linear(p.linear_unchecked(s), a) - log_prob_from_linear(b.dot(s), a))
        .sum()
}

/// Ratios of the suggested policy `p` against the behavioral policy `b`.
pub fn is_ratios(p: &MaskedPolicy, b: &PolicyParams, d: &Dataset) -> Result<ISRatios> {
    check_dims(p, b, d)?;
    let log_ratios: Vec<f64> = d.trajectories.iter().map(|tr| log_ratio(p, &b.coefficients, tr)).collect();
    let max = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled_mean = log_ratios.iter().map(|l| (l - max).exp()).sum::<f64>() / log_ratios.len() as f64;
    Ok(ISRatios { mean_ratio: max.exp() * scaled_mean, log_ratios, returns: d.returns() })
}

/// Self-normalized value with the plain IS value and the plug-in sd alongside.
pub fn value_weighted(r: &ISRatios) -> Result<ValueEstimate> {
    if r.n() < 2 {
        return Err(Error::InvalidArgument(format!("value estimation needs n >= 2, got {}", r.n())));
    }
    r.check_weights()?;
    let w = r.scaled_weights();
    let wsum: f64 = w.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::DegenerateWeights { spread: r.spread(), limit: MAX_LOG_RATIO_SPREAD });
    }
    let v = w.iter().zip(&r.returns).map(|(w, g)| w * g).sum::<f64>() / wsum;
    let ratios = r.ratios();
    let v_unweighted = ratios.iter().zip(&r.returns).map(|(r, g)| r * g).sum::<f64>() / r.n() as f64;
    Ok(ValueEstimate { v_weighted: v, v_unweighted, sd_weighted: value_variance(r, v).sqrt(), n: r.n() })
}

/// Plug-in variance of `sqrt(n) V_n`:
/// `[(1/n) sum_i (r_i G_i - v)^2] / (E_n r)^2`.
pub fn value_variance(r: &ISRatios, v: f64) -> f64 {
    let n = r.n() as f64;
    let ss: f64 = r.log_ratios.iter().zip(&r.returns).map(|(l, g)| (l.exp() * g - v).powi(2)).sum();
    (ss / n) / (r.mean_ratio * r.mean_ratio)
}

/// Value of `p` on `d` with `b` as the behavioral denominator.
pub fn value_of(p: &MaskedPolicy, b: &PolicyParams, d: &Dataset) -> Result<ValueEstimate> {
    value_weighted(&is_ratios(p, b, d)?)
}

/// Mean of `pi(1|s)` over every decision point in the dataset.
pub fn avg_treat_prob(p: &MaskedPolicy, d: &Dataset) -> Result<f64> {
    if p.dim() != d.dim() {
        return Err(Error::Dimension { expected: d.dim(), found: p.dim() });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for tr in &d.trajectories {
        for (s, _) in tr.decisions() {
            sum += crate::policy::expit(p.linear_unchecked(s));
            count += 1;
        }
    }
    Ok(sum / count as f64)
}
