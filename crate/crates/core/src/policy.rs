//! Logistic (expit) treatment policies and the masked post-selection policy
//!
//! The masked policy treats with probability
//! `expit(beta' (s * m) + b' (s * (1 - m)))`, where `m` is the 0/1 active mask:
//! active coordinates use the suggested coefficients and the rest stay pinned
//! to the behavioral ones.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `1 / (1 + exp(-x))` without overflow for large `|x|`.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log expit(x) = -softplus(-x)`.
pub fn log_expit(x: f64) -> f64 {
    -softplus(-x)
}

/// Log-probability of `action` under a logistic model with linear argument `eta`.
pub fn log_prob_from_linear(eta: f64, action: u8) -> f64 {
    if action == 1 {
        log_expit(eta)
    } else {
        log_expit(-eta)
    }
}

/// Coefficient vector of a logistic policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    #[serde(with = "crate::linalg::serde_dvector")]
    pub coefficients: DVector<f64>,
}

impl PolicyParams {
    pub fn new(coefficients: DVector<f64>) -> Self {
        PolicyParams { coefficients }
    }

    pub fn from_slice(c: &[f64]) -> Self {
        PolicyParams { coefficients: DVector::from_column_slice(c) }
    }

    pub fn zeros(k: usize) -> Self {
        PolicyParams { coefficients: DVector::zeros(k) }
    }

    pub fn dim(&self) -> usize {
        self.coefficients.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.coefficients.as_slice()
    }

    pub fn linear(&self, s: &DVector<f64>) -> f64 {
        self.coefficients.dot(s)
    }

    pub fn prob_treat(&self, s: &DVector<f64>) -> f64 {
        expit(self.linear(s))
    }
}

/// Which coordinates are free (active) in the suggested policy.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActiveMask(Vec<bool>);

impl ActiveMask {
    pub fn all(k: usize) -> Self {
        ActiveMask(vec![true; k])
    }

    pub fn none(k: usize) -> Self {
        ActiveMask(vec![false; k])
    }

    pub fn from_bools(v: Vec<bool>) -> Self {
        ActiveMask(v)
    }

    /// From 0-based active indices.
    pub fn from_indices(k: usize, active: &[usize]) -> Result<Self> {
        let mut m = vec![false; k];
        for &i in active {
            if i >= k {
                return Err(Error::InvalidArgument(format!("active index {} out of range for K={k}", i + 1)));
            }
            m[i] = true;
        }
        Ok(ActiveMask(m))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.0[k]
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&k| self.0[k]).collect()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn as_bools(&self) -> &[bool] {
        &self.0
    }
}

/// Suggested policy with non-active coordinates pinned to the behavioral `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedPolicy {
    #[serde(with = "crate::linalg::serde_dvector")]
    pub beta: DVector<f64>,
    #[serde(with = "crate::linalg::serde_dvector")]
    pub b: DVector<f64>,
    pub mask: ActiveMask,
}

/// Per-step log-probability derivatives for one `(a, s)` pair.
#[derive(Debug, Clone)]
pub struct StepDerivs {
    /// `pi_{beta,b}(1|s)`.
    pub pi: f64,
    /// `s * m`.
    pub x_active: DVector<f64>,
    /// `s * (1 - m)`.
    pub x_pinned: DVector<f64>,
    /// d/d beta log pi_{beta,b}(a|s).
    pub grad_beta: DVector<f64>,
    /// d/d b log pi_{beta,b}(a|s); b enters only through pinned coordinates.
    pub grad_b: DVector<f64>,
    /// d^2/d beta^2 log pi_{beta,b}(a|s).
    pub hess_beta: DMatrix<f64>,
    /// d^2/(d beta d b) log pi_{beta,b}(a|s); rows index beta, columns b.
    pub cross_beta_b: DMatrix<f64>,
    /// `pi_b(1|s)` of the behavioral (denominator) policy.
    pub pi_behavioral: f64,
    /// d/d b log pi_b(a|s).
    pub behavioral_score: DVector<f64>,
    /// d^2/d b^2 log pi_b(a|s).
    pub behavioral_hess: DMatrix<f64>,
}

impl MaskedPolicy {
    pub fn new(beta: DVector<f64>, b: DVector<f64>, mask: ActiveMask) -> Result<Self> {
        if beta.len() != b.len() {
            return Err(Error::Dimension { expected: b.len(), found: beta.len() });
        }
        if mask.len() != b.len() {
            return Err(Error::Dimension { expected: b.len(), found: mask.len() });
        }
        if beta.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("policy coefficients must be finite".into()));
        }
        Ok(MaskedPolicy { beta, b, mask })
    }

    /// Plain policy `expit(beta' s)`: every coordinate active.
    pub fn unmasked(beta: &PolicyParams, b: &PolicyParams) -> Result<Self> {
        let k = b.dim();
        MaskedPolicy::new(beta.coefficients.clone(), b.coefficients.clone(), ActiveMask::all(k))
    }

    /// The behavioral policy itself: nothing active.
    pub fn behavioral(b: &PolicyParams) -> Self {
        let k = b.dim();
        MaskedPolicy { beta: b.coefficients.clone(), b: b.coefficients.clone(), mask: ActiveMask::none(k) }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Effective coefficients `beta * m + b * (1 - m)`.
    pub fn effective(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|k| if self.mask.is_active(k) { self.beta[k] } else { self.b[k] }),
        )
    }

    pub fn behavioral_params(&self) -> PolicyParams {
        PolicyParams::new(self.b.clone())
    }

    fn check(&self, s: &DVector<f64>) -> Result<()> {
        if s.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), found: s.len() });
        }
        Ok(())
    }

    pub(crate) fn linear_unchecked(&self, s: &DVector<f64>) -> f64 {
        let mut eta = 0.0;
        for k in 0..s.len() {
            let c = if self.mask.is_active(k) { self.beta[k] } else { self.b[k] };
            eta += c * s[k];
        }
        eta
    }

    pub fn linear(&self, s: &DVector<f64>) -> Result<f64> {
        self.check(s)?;
        Ok(self.linear_unchecked(s))
    }

    pub fn prob_treat(&self, s: &DVector<f64>) -> Result<f64> {
        Ok(expit(self.linear(s)?))
    }

    pub fn log_prob(&self, a: u8, s: &DVector<f64>) -> Result<f64> {
        Ok(log_prob_from_linear(self.linear(s)?, a))
    }

    pub fn log_prob_derivs(&self, a: u8, s: &DVector<f64>) -> Result<StepDerivs> {
        self.check(s)?;
        Ok(self.step_derivs(a, s))
    }

    pub(crate) fn step_derivs(&self, a: u8, s: &DVector<f64>) -> StepDerivs {
        let k = self.dim();
        let pi = expit(self.linear_unchecked(s));
        let dpi = pi * (1.0 - pi);
        let resid = a as f64 - pi;
        let x_active =
            DVector::from_iterator(k, (0..k).map(|j| if self.mask.is_active(j) { s[j] } else { 0.0 }));
        let x_pinned = s - &x_active;
        let pi_b = expit(self.b.dot(s));
        let dpi_b = pi_b * (1.0 - pi_b);
        StepDerivs {
            pi,
            grad_beta: &x_active * resid,
            grad_b: &x_pinned * resid,
            hess_beta: &x_active * x_active.transpose() * (-dpi),
            cross_beta_b: &x_active * x_pinned.transpose() * (-dpi),
            pi_behavioral: pi_b,
            behavioral_score: s * (a as f64 - pi_b),
            behavioral_hess: s * s.transpose() * (-dpi_b),
            x_active,
            x_pinned,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn expit_is_stable_and_symmetric() {
        assert_eq!(expit(0.0), 0.5);
        assert_eq!(expit(800.0), 1.0);
        assert_eq!(expit(-800.0), 0.0);
        assert!((expit(3.0) + expit(-3.0) - 1.0).abs() < 1e-15);
        assert!((log_expit(-800.0) + 800.0).abs() < 1e-12);
        assert!(log_expit(800.0).abs() < 1e-300);
    }

    #[test]
    fn hand_evaluated_masked_linear_form() {
        let p = MaskedPolicy::new(v(&[0.0, 5.0]), v(&[1.0, 0.0]), ActiveMask::from_bools(vec![false, true])).unwrap();
        let s = v(&[2.0, 1.0]);
        assert_eq!(p.linear(&s).unwrap(), 7.0);
        assert_eq!(p.prob_treat(&s).unwrap(), expit(7.0));
        assert!((p.log_prob(1, &s).unwrap() - expit(7.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn mask_extremes_reduce_to_plain_policies() {
        let beta = v(&[0.3, -1.2, 0.7]);
        let b = v(&[-0.4, 0.9, 0.1]);
        let s = v(&[1.5, -0.2, 0.8]);
        let all = MaskedPolicy::new(beta.clone(), b.clone(), ActiveMask::all(3)).unwrap();
        let none = MaskedPolicy::new(beta.clone(), b.clone(), ActiveMask::none(3)).unwrap();
        assert_eq!(all.prob_treat(&s).unwrap(), expit(beta.dot(&s)));
        assert_eq!(none.prob_treat(&s).unwrap(), expit(b.dot(&s)));
        let d = all.log_prob_derivs(1, &s).unwrap();
        assert!(d.grad_b.iter().all(|&g| g == 0.0));
        assert!(d.cross_beta_b.iter().all(|&g| g == 0.0));
        // full mask equals the plain policy score and Hessian exactly
        let pi = expit(beta.dot(&s));
        assert_eq!(d.grad_beta, &s * (1.0 - pi));
        assert_eq!(d.hess_beta, &s * s.transpose() * (-(pi * (1.0 - pi))));
    }

    #[test]
    fn null_policy_is_a_fair_coin() {
        let p = MaskedPolicy::new(v(&[0.0, 0.0]), v(&[0.0, 0.0]), ActiveMask::all(2)).unwrap();
        let s = v(&[4.0, -2.0]);
        assert_eq!(p.log_prob(0, &s).unwrap(), 0.5f64.ln());
        assert_eq!(p.log_prob(1, &s).unwrap(), 0.5f64.ln());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = MaskedPolicy::new(v(&[0.0, 0.0]), v(&[0.0, 0.0]), ActiveMask::all(2)).unwrap();
        assert!(matches!(p.prob_treat(&v(&[1.0])), Err(Error::Dimension { expected: 2, found: 1 })));
        assert!(MaskedPolicy::new(v(&[0.0]), v(&[0.0, 0.0]), ActiveMask::all(2)).is_err());
    }
}
