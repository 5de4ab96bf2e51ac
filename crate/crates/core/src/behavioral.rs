//! Maximum-likelihood fit of the behavioral (data-generating) policy.
//!
//! The behavioral policy is stationary and Markov, so the trajectory
//! log-likelihood is an ordinary logistic regression on the pooled `(s, a)`
//! pairs. We fit it by Newton-Raphson with step halving and keep the
//! curvature around for the influence terms of the nuisance.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{checked_inverse, serde_dmatrix, symmetrize};
use crate::policy::{log_prob_from_linear, PolicyParams};
use crate::stats::two_sided_critical;
use crate::trajectories::Dataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub max_iters: usize,
    /// Converged once every component of the mean score is below this.
    pub score_tol: f64,
    /// ... or once the score norm stops changing by more than this, relatively.
    pub stall_tol: f64,
    /// Any coefficient beyond this magnitude is treated as separation.
    pub divergence_limit: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { max_iters: 100, score_tol: 1e-10, stall_tol: 1e-12, divergence_limit: 50.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BehavioralFit {
    pub b_n: PolicyParams,
    /// `(-E_n l''(b_n))^{-1}`, the inverse of the per-trajectory information.
    #[serde(with = "serde_dmatrix")]
    pub neg_hessian_inv: DMatrix<f64>,
    /// Per-trajectory scores `l'_i(b_n)` (summed over time).
    #[serde(skip)]
    pub per_trajectory_scores: Vec<DVector<f64>>,
    pub converged: bool,
    pub iterations: usize,
    /// Mean per-trajectory log-likelihood at `b_n`.
    pub log_likelihood: f64,
    pub n: usize,
}

impl BehavioralFit {
    /// Asymptotic covariance of `b_n` itself, `(-E_n l'')^{-1} / n`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.neg_hessian_inv / self.n as f64
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        let cov = self.covariance();
        (0..cov.nrows()).map(|k| cov[(k, k)].max(0.0).sqrt()).collect()
    }

    /// Wald intervals `b_n,k +- z * se_k`.
    pub fn wald_intervals(&self, level: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let z = two_sided_critical(level)?;
        let se = self.standard_errors();
        let b = self.b_n.as_slice();
        Ok((
            b.iter().zip(&se).map(|(c, s)| c - z * s).collect(),
            b.iter().zip(&se).map(|(c, s)| c + z * s).collect(),
        ))
    }
}

struct Pooled {
    loglik: f64,
    score: DVector<f64>,
    hess: DMatrix<f64>,
}

fn pooled(d: &Dataset, b: &DVector<f64>, per_traj: Option<&mut Vec<DVector<f64>>>) -> Pooled {
    let k = d.dim();
    let n = d.n() as f64;
    let mut loglik = 0.0;
    let mut score = DVector::zeros(k);
    let mut hess = DMatrix::zeros(k, k);
    let mut scores = Vec::new();
    for tr in &d.trajectories {
        let mut si = DVector::zeros(k);
        for (s, a) in tr.decisions() {
            let eta = b.dot(s);
            let pi = crate::policy::expit(eta);
            loglik += log_prob_from_linear(eta, a);
            si.axpy(a as f64 - pi, s, 1.0);
            hess.ger(-pi * (1.0 - pi), s, s, 1.0);
        }
        score += &si;
        scores.push(si);
    }
    if let Some(out) = per_traj {
        *out = scores;
    }
    Pooled { loglik: loglik / n, score: score / n, hess: hess / n }
}

pub fn fit_mle(d: &Dataset) -> Result<BehavioralFit> {
    fit_mle_with(d, &NewtonOptions::default())
}

pub fn fit_mle_with(d: &Dataset, opts: &NewtonOptions) -> Result<BehavioralFit> {
    if d.n() == 0 {
        return Err(Error::EmptyDataset);
    }
    let k = d.dim();
    let mut b = DVector::zeros(k);
    let mut cur = pooled(d, &b, None);
    let mut converged = cur.score.amax() <= opts.score_tol;
    let mut iterations = 0;
    while !converged && iterations < opts.max_iters {
        iterations += 1;
        let neg_h = -&cur.hess;
        let step = neg_h
            .clone()
            .cholesky()
            .map(|c| c.solve(&cur.score))
            .ok_or_else(|| Error::Singular("behavioral Hessian (collinear states?)".into()))?;
        let mut t = 1.0;
        let mut next_b = &b + &step * t;
        let mut next = pooled(d, &next_b, None);
        let mut halvings = 0;
        while !(next.loglik >= cur.loglik) && halvings < 40 {
            t *= 0.5;
            halvings += 1;
            next_b = &b + &step * t;
            next = pooled(d, &next_b, None);
        }
        if next_b.amax() > opts.divergence_limit {
            return Err(Error::Separable { limit: opts.divergence_limit });
        }
        let old_norm = cur.score.norm();
        let new_norm = next.score.norm();
        b = next_b;
        cur = next;
        converged = cur.score.amax() <= opts.score_tol
            || (old_norm - new_norm).abs() <= opts.stall_tol * old_norm.max(f64::MIN_POSITIVE);
    }
    if !converged {
        return Err(Error::NotConverged { iterations, last: b.iter().copied().collect() });
    }
    // Newton drives the score to zero on separable data too, just with every
    // fitted probability pinned at the observed action.
    let max_resid = d
        .trajectories
        .iter()
        .flat_map(|tr| tr.decisions())
        .map(|(s, a)| (a as f64 - crate::policy::expit(b.dot(s))).abs())
        .fold(0.0, f64::max);
    if max_resid < 1e-6 {
        return Err(Error::Separable { limit: opts.divergence_limit });
    }
    let mut scores = Vec::new();
    let fin = pooled(d, &b, Some(&mut scores));
    let neg_hessian_inv = symmetrize(&checked_inverse(&(-&fin.hess), "behavioral information matrix")?);
    Ok(BehavioralFit {
        b_n: PolicyParams::new(b),
        neg_hessian_inv,
        per_trajectory_scores: scores,
        converged,
        iterations,
        log_likelihood: fin.loglik,
        n: d.n(),
    })
}

/// Mean per-trajectory behavioral log-likelihood at an arbitrary `b`.
pub fn log_likelihood(d: &Dataset, b: &PolicyParams) -> f64 {
    pooled(d, &b.coefficients, None).loglik
}

/// Per-trajectory influence terms `q_i = (-E_n l''(b_n))^{-1} l'_i(b_n)`, so
/// that `sqrt(n) * mean(q_i)` approximates `sqrt(n) (b_n - b_0)`.
pub fn influence_q(fit: &BehavioralFit) -> Result<Vec<DVector<f64>>> {
    if !fit.converged {
        return Err(Error::InvalidArgument("influence terms need a converged behavioral fit".into()));
    }
    Ok(fit.per_trajectory_scores.iter().map(|s| &fit.neg_hessian_inv * s).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub mean_predicted: f64,
    pub observed: f64,
    pub count: usize,
}

/// Pooled `(s, a)` pairs bucketed into `bins` equal-width bins of predicted
/// `pi_b(1|s)`. Only occupied bins are returned.
pub fn calibration_table(b: &PolicyParams, d: &Dataset, bins: usize) -> Result<Vec<CalibrationBin>> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("calibration needs at least 2 bins, got {bins}")));
    }
    if d.n() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut sum_pred = vec![0.0; bins];
    let mut sum_obs = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for tr in &d.trajectories {
        for (s, a) in tr.decisions() {
            let p = b.prob_treat(s);
            let idx = ((p * bins as f64) as usize).min(bins - 1);
            sum_pred[idx] += p;
            sum_obs[idx] += a as f64;
            count[idx] += 1;
        }
    }
    Ok((0..bins)
        .filter(|&i| count[i] > 0)
        .map(|i| CalibrationBin {
            lower: i as f64 / bins as f64,
            upper: (i + 1) as f64 / bins as f64,
            mean_predicted: sum_pred[i] / count[i] as f64,
            observed: sum_obs[i] / count[i] as f64,
            count: count[i],
        })
        .collect())
}

/// Calibration averaged over `repeats` random halvings: the policy is refit
/// on one half and tabulated on the other, and bins are pooled by count.
pub fn resampled_calibration(d: &Dataset, bins: usize, repeats: usize, seed: u64) -> Result<Vec<CalibrationBin>> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("resampled calibration needs at least one repeat".into()));
    }
    if d.n() < 4 {
        return Err(Error::InvalidArgument(format!("cannot halve {} trajectories for calibration", d.n())));
    }
    let mut pooled: Vec<Option<CalibrationBin>> = vec![None; bins];
    for r in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let mut idx: Vec<usize> = (0..d.n()).collect();
        idx.shuffle(&mut rng);
        let (fit_half, check_half) = idx.split_at(d.n() / 2);
        let fit = fit_mle(&d.subset(fit_half)?)?;
        for bin in calibration_table(&fit.b_n, &d.subset(check_half)?, bins)? {
            let i = ((bin.lower * bins as f64).round() as usize).min(bins - 1);
            let slot = pooled[i].get_or_insert(CalibrationBin { mean_predicted: 0.0, observed: 0.0, count: 0, ..bin });
            let total = (slot.count + bin.count) as f64;
            slot.mean_predicted = (slot.mean_predicted * slot.count as f64 + bin.mean_predicted * bin.count as f64) / total;
            slot.observed = (slot.observed * slot.count as f64 + bin.observed * bin.count as f64) / total;
            slot.count += bin.count;
        }
    }
    Ok(pooled.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectories::Trajectory;

    fn single_step(points: &[(f64, u8)]) -> Dataset {
        let trs = points
            .iter()
            .map(|&(s, a)| {
                Trajectory::new(vec![DVector::from_vec(vec![s]), DVector::from_vec(vec![0.0])], vec![a], vec![0.0])
                    .unwrap()
            })
            .collect();
        Dataset::new(trs).unwrap()
    }

    #[test]
    fn symmetric_data_gives_null_coefficient() {
        let d = single_step(&[(-1.0, 0), (-1.0, 1), (1.0, 0), (1.0, 1), (2.0, 1), (2.0, 0), (-2.0, 1), (-2.0, 0)]);
        let fit = fit_mle(&d).unwrap();
        assert!(fit.b_n.coefficients[0].abs() < 1e-6);
        assert!(fit.converged);
    }

    #[test]
    fn score_is_zero_at_the_mle() {
        let d = single_step(&[(-1.0, 0), (0.5, 1), (1.0, 0), (1.5, 1), (-0.3, 1), (2.0, 1), (-2.0, 0)]);
        let fit = fit_mle(&d).unwrap();
        let mean: f64 = fit.per_trajectory_scores.iter().map(|s| s[0]).sum::<f64>() / d.n() as f64;
        assert!(mean.abs() < 1e-8);
        let q = influence_q(&fit).unwrap();
        let qbar: f64 = q.iter().map(|v| v[0]).sum::<f64>() / q.len() as f64;
        assert!(qbar.abs() < 1e-8);
    }

    #[test]
    fn influence_matches_hand_calculation() {
        // K = 1, states 1 and 2 with actions 1 and 0 -> b_n solves
        // (1 - expit(b)) - 2 expit(2b) = 0.
        let d = single_step(&[(1.0, 1), (2.0, 0)]);
        let fit = fit_mle(&d).unwrap();
        let b = fit.b_n.coefficients[0];
        let p1 = crate::policy::expit(b);
        let p2 = crate::policy::expit(2.0 * b);
        assert!(((1.0 - p1) - 2.0 * p2).abs() < 1e-12);
        let info = (p1 * (1.0 - p1) + 4.0 * p2 * (1.0 - p2)) / 2.0;
        let q = influence_q(&fit).unwrap();
        assert!((q[0][0] - (1.0 - p1) / info).abs() < 1e-10);
        assert!((q[1][0] - (-2.0 * p2) / info).abs() < 1e-10);
    }

    #[test]
    fn separable_data_is_rejected() {
        let d = single_step(&[(-1.0, 0), (-2.0, 0), (1.0, 1), (2.0, 1)]);
        assert!(matches!(fit_mle(&d), Err(Error::Separable { .. })));
    }

    #[test]
    fn calibration_of_a_constant_predictor() {
        let d = single_step(&[(1.0, 0), (2.0, 1), (3.0, 0), (4.0, 1)]);
        let t = calibration_table(&PolicyParams::zeros(1), &d, 10).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].count, 4);
        assert_eq!(t[0].observed, 0.5);
        assert_eq!(t[0].mean_predicted, 0.5);
        assert!(calibration_table(&PolicyParams::zeros(1), &d, 1).is_err());
    }

    #[test]
    fn resampled_calibration_pools_every_held_out_pair() {
        let pts: Vec<(f64, u8)> = (0..40).map(|i| ((i as f64 - 20.0) / 10.0, (i % 3 == 0) as u8)).collect();
        let d = single_step(&pts);
        let t = resampled_calibration(&d, 5, 3, 1).unwrap();
        assert_eq!(t.iter().map(|b| b.count).sum::<usize>(), 3 * 20);
        assert!(t.windows(2).all(|w| w[0].lower < w[1].lower));
        assert_eq!(t, resampled_calibration(&d, 5, 3, 1).unwrap());
        assert!(resampled_calibration(&d, 5, 0, 1).is_err());
    }
}
