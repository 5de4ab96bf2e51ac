//! The KL-penalized value objective, its analytic derivatives, and the smooth
//! fit that serves as the pilot estimate and the post-selection refit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{bfgs_ascent, AscentOptions};
use crate::policy::{log_prob_from_linear, ActiveMask, MaskedPolicy, PolicyParams};
use crate::trajectories::Dataset;
use crate::value::{is_ratios, log_ratio, value_weighted, MAX_LOG_RATIO_SPREAD};

/// Tuning triple plus optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Weight of the KL penalty. Must be positive for a finite maximizer.
    pub gamma: f64,
    /// Relative-sparsity penalty level.
    pub lambda: f64,
    /// Exponent of the adaptive weights.
    pub delta: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_init: f64,
    /// Per-iteration cap on the move of any coordinate.
    pub max_coord_step: f64,
    /// Extra starting points tried around `b_n` (0 = start at `b_n` only).
    pub multi_start: usize,
}

impl FitConfig {
    pub fn new(gamma: f64) -> Self {
        FitConfig {
            gamma,
            lambda: 0.0,
            delta: 1.0,
            max_iters: 500,
            grad_tol: 1e-8,
            step_init: 1.0,
            max_coord_step: 5.0,
            multi_start: 0,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "gamma must be positive and finite (got {}); without the KL penalty the maximizer is unbounded",
                self.gamma
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {}", self.delta)));
        }
        if !(self.grad_tol > 0.0) || !(self.step_init > 0.0) || !(self.max_coord_step > 0.0) {
            return Err(Error::InvalidArgument("optimizer tolerances and steps must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn ascent_options(&self) -> AscentOptions {
        AscentOptions {
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            step_init: self.step_init,
            max_coord_step: self.max_coord_step,
        }
    }
}

/// Gradient, Hessian and cross-derivative (in `b`) of the objective, plus the
/// per-trajectory gradient terms whose mean is the gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DerivativeBundle {
    #[serde(with = "crate::linalg::serde_dvector")]
    pub gradient: DVector<f64>,
    #[serde(with = "crate::linalg::serde_dmatrix")]
    pub hessian: DMatrix<f64>,
    /// Rows index `beta`, columns index `b`.
    #[serde(with = "crate::linalg::serde_dmatrix")]
    pub cross: DMatrix<f64>,
    #[serde(skip)]
    pub per_trajectory_z: Vec<DVector<f64>>,
}

fn check_dims(p: &MaskedPolicy, b: &PolicyParams, d: &Dataset) -> Result<()> {
    if p.dim() != d.dim() || b.dim() != d.dim() {
        return Err(Error::Dimension { expected: d.dim(), found: if p.dim() != d.dim() { p.dim() } else { b.dim() } });
    }
    Ok(())
}

/// Mean over trajectories of `sum_t [log pi_b - log pi_{beta,b}]`.
pub fn kl_n(p: &MaskedPolicy, b: &PolicyParams, d: &Dataset) -> Result<f64> {
    check_dims(p, b, d)?;
    Ok(-d.trajectories.iter().map(|tr| log_ratio(p, &b.coefficients, tr)).sum::<f64>() / d.n() as f64)
}

/// `V_n - gamma * KL_n`.
pub fn m_n(p: &MaskedPolicy, b: &PolicyParams, d: &Dataset, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be non-negative, got {gamma}")));
    }
    let r = is_ratios(p, b, d)?;
    let v = value_weighted(&r)?;
    let kl = -r.log_ratios.iter().sum::<f64>() / r.n() as f64;
    Ok(v.v_weighted - gamma * kl)
}

/// Objective value and gradient in `beta` without the second-order terms.
#[derive(Debug, Clone)]
pub(crate) struct Smooth {
    pub objective: f64,
    pub gradient: DVector<f64>,
}

pub(crate) fn smooth_objective(p: &MaskedPolicy, b: &DVector<f64>, d: &Dataset, gamma: f64) -> Result<Smooth> {
    let k = d.dim();
    let n = d.n();
    let mut logs = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(n);
    for tr in &d.trajectories {
        let mut l = 0.0;
        let mut g = DVector::zeros(k);
        for (s, a) in tr.decisions() {
            let eta = p.linear_unchecked(s);
            l += log_prob_from_linear(eta, a) - log_prob_from_linear(b.dot(s), a);
            let resid = a as f64 - crate::policy::expit(eta);
            for j in 0..k {
                if p.mask.is_active(j) {
                    g[j] += resid * s[j];
                }
            }
        }
        logs.push(l);
        grads.push(g);
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = logs.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max - min <= MAX_LOG_RATIO_SPREAD) {
        return Err(Error::DegenerateWeights { spread: max - min, limit: MAX_LOG_RATIO_SPREAD });
    }
    let nf = n as f64;
    let mut b_sum = 0.0;
    let mut a_sum = 0.0;
    let mut kl = 0.0;
    let mut a_grad = DVector::zeros(k);
    let mut b_grad = DVector::zeros(k);
    let mut g_sum = DVector::zeros(k);
    for (i, tr) in d.trajectories.iter().enumerate() {
        let w = (logs[i] - max).exp();
        let ret = tr.total_return();
        b_sum += w;
        a_sum += w * ret;
        kl -= logs[i];
        a_grad.axpy(w * ret, &grads[i], 1.0);
        b_grad.axpy(w, &grads[i], 1.0);
        g_sum += &grads[i];
    }
    let (bm, am) = (b_sum / nf, a_sum / nf);
    let gradient = a_grad / (nf * bm) - b_grad * (am / (nf * bm * bm)) + g_sum * (gamma / nf);
    Ok(Smooth { objective: am / bm - gamma * kl / nf, gradient })
}

/// Analytic derivatives of the objective at `(p.beta, p.b)` with `b` as the
/// behavioral denominator. The nuisance derivative accounts for `b` entering
/// both the denominator and the pinned coordinates of the numerator policy.
pub fn derivative_bundle(p: &MaskedPolicy, b: &PolicyParams, d: &Dataset, gamma: f64) -> Result<DerivativeBundle> {
    check_dims(p, b, d)?;
    if p.b != b.coefficients {
        return Err(Error::InvalidArgument(
            "the masked policy must pin its non-active coordinates to the behavioral coefficients".into(),
        ));
    }
    let k = d.dim();
    let n = d.n();
    let nf = n as f64;
    struct Traj {
        log_ratio: f64,
        ret: f64,
        g_beta: DVector<f64>,
        g_b: DVector<f64>,
        h_beta: DMatrix<f64>,
        h_cross: DMatrix<f64>,
    }
    let mut per = Vec::with_capacity(n);
    for tr in &d.trajectories {
        let mut t = Traj {
            log_ratio: 0.0,
            ret: tr.total_return(),
            g_beta: DVector::zeros(k),
            g_b: DVector::zeros(k),
            h_beta: DMatrix::zeros(k, k),
            h_cross: DMatrix::zeros(k, k),
        };
        for (s, a) in tr.decisions() {
            let sd = p.step_derivs(a, s);
            t.log_ratio += log_prob_from_linear(p.linear_unchecked(s), a) - log_prob_from_linear(b.coefficients.dot(s), a);
            t.g_beta += &sd.grad_beta;
            t.g_b += &sd.grad_b - &sd.behavioral_score;
            t.h_beta += &sd.hess_beta;
            t.h_cross += &sd.cross_beta_b;
        }
        per.push(t);
    }
    let max = per.iter().map(|t| t.log_ratio).fold(f64::NEG_INFINITY, f64::max);
    let min = per.iter().map(|t| t.log_ratio).fold(f64::INFINITY, f64::min);
    if !(max - min <= MAX_LOG_RATIO_SPREAD) {
        return Err(Error::DegenerateWeights { spread: max - min, limit: MAX_LOG_RATIO_SPREAD });
    }

    // Means of the (rescaled) ratio r and of v = G r, with their derivatives.
    let mut br = 0.0;
    let mut av = 0.0;
    let mut br_beta = DVector::zeros(k);
    let mut av_beta = DVector::zeros(k);
    let mut br_b = DVector::zeros(k);
    let mut av_b = DVector::zeros(k);
    let mut br_bb = DMatrix::zeros(k, k);
    let mut av_bb = DMatrix::zeros(k, k);
    let mut br_cross = DMatrix::zeros(k, k);
    let mut av_cross = DMatrix::zeros(k, k);
    let mut mean_h = DMatrix::zeros(k, k);
    let mut mean_cross = DMatrix::zeros(k, k);
    let weights: Vec<f64> = per.iter().map(|t| (t.log_ratio - max).exp()).collect();
    for (t, &w) in per.iter().zip(&weights) {
        let gv = t.ret * w;
        br += w;
        av += gv;
        br_beta.axpy(w, &t.g_beta, 1.0);
        av_beta.axpy(gv, &t.g_beta, 1.0);
        br_b.axpy(w, &t.g_b, 1.0);
        av_b.axpy(gv, &t.g_b, 1.0);
        let second = &t.g_beta * t.g_beta.transpose() + &t.h_beta;
        let cross = &t.g_beta * t.g_b.transpose() + &t.h_cross;
        br_bb += &second * w;
        av_bb += &second * gv;
        br_cross += &cross * w;
        av_cross += &cross * gv;
        mean_h += &t.h_beta;
        mean_cross += &t.h_cross;
    }
    for m in [&mut br_bb, &mut av_bb, &mut br_cross, &mut av_cross, &mut mean_h, &mut mean_cross] {
        *m /= nf;
    }
    for v in [&mut br_beta, &mut av_beta, &mut br_b, &mut av_b] {
        *v /= nf;
    }
    br /= nf;
    av /= nf;

    let second_order = |a_xy: &DMatrix<f64>, b_xy: &DMatrix<f64>, a_y: &DVector<f64>, b_y: &DVector<f64>| {
        a_xy / br - (&av_beta * b_y.transpose()) / (br * br) - (&br_beta * a_y.transpose()) / (br * br)
            - b_xy * (av / (br * br))
            + (&br_beta * b_y.transpose()) * (2.0 * av / (br * br * br))
    };
    let hessian = crate::linalg::symmetrize(&(second_order(&av_bb, &br_bb, &av_beta, &br_beta) + &mean_h * gamma));
    let cross = second_order(&av_cross, &br_cross, &av_b, &br_b) + &mean_cross * gamma;

    let per_trajectory_z: Vec<DVector<f64>> = per
        .iter()
        .zip(&weights)
        .map(|(t, &w)| &t.g_beta * (w * t.ret / br) - &br_beta * (w * t.ret / (br * br)) + &t.g_beta * gamma)
        .collect();
    let mut gradient = DVector::zeros(k);
    for z in &per_trajectory_z {
        gradient += z;
    }
    gradient /= nf;
    Ok(DerivativeBundle { gradient, hessian, cross, per_trajectory_z })
}

/// Result of maximizing the KL-penalized objective over the active coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrpoFit {
    /// Fitted coefficients; non-active coordinates equal `b`.
    pub beta: PolicyParams,
    pub mask: ActiveMask,
    pub objective: f64,
    /// Sup norm of the gradient on the active coordinates.
    pub grad_inf: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl TrpoFit {
    pub fn policy(&self, b: &PolicyParams) -> MaskedPolicy {
        MaskedPolicy { beta: self.beta.coefficients.clone(), b: b.coefficients.clone(), mask: self.mask.clone() }
    }
}

pub fn fit_trpo(b: &PolicyParams, d: &Dataset, gamma: f64, mask: &ActiveMask) -> Result<TrpoFit> {
    fit_trpo_with(b, d, mask, &FitConfig::new(gamma))
}

/// Quasi-Newton ascent on the objective over `mask`'s coordinates, started at `b`.
pub fn fit_trpo_with(b: &PolicyParams, d: &Dataset, mask: &ActiveMask, cfg: &FitConfig) -> Result<TrpoFit> {
    cfg.validate()?;
    if b.dim() != d.dim() || mask.len() != d.dim() {
        return Err(Error::Dimension { expected: d.dim(), found: if b.dim() != d.dim() { b.dim() } else { mask.len() } });
    }
    let free = mask.active_indices();
    let eval = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let p = MaskedPolicy { beta: x.clone(), b: b.coefficients.clone(), mask: mask.clone() };
        let s = smooth_objective(&p, &b.coefficients, d, cfg.gamma)?;
        Ok((s.objective, s.gradient))
    };
    let mut starts = vec![b.coefficients.clone()];
    for j in 0..cfg.multi_start {
        if free.is_empty() {
            break;
        }
        let coord = free[j % free.len()];
        let sign = if (j / free.len()) % 2 == 0 { 1.0 } else { -1.0 };
        let mut x = b.coefficients.clone();
        x[coord] += sign * (1.0 + (j / (2 * free.len())) as f64);
        starts.push(x);
    }
    let mut best: Option<TrpoFit> = None;
    for x0 in starts {
        let r = match bfgs_ascent(&x0, &free, eval, &cfg.ascent_options()) {
            Ok(r) => r,
            Err(e) if best.is_some() => {
                let _ = e;
                continue;
            }
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|f| r.value > f.objective) {
            best = Some(TrpoFit {
                beta: PolicyParams::new(r.x),
                mask: mask.clone(),
                objective: r.value,
                grad_inf: r.grad_inf,
                iterations: r.iterations,
                converged: r.converged,
            });
        }
    }
    Ok(best.expect("at least one start"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectories::Trajectory;

    fn one_step(points: &[([f64; 2], u8, f64)]) -> Dataset {
        let trs = points
            .iter()
            .map(|(s, a, r)| {
                Trajectory::new(vec![DVector::from_vec(s.to_vec()), DVector::zeros(2)], vec![*a], vec![*r]).unwrap()
            })
            .collect();
        Dataset::new(trs).unwrap()
    }

    fn toy() -> Dataset {
        one_step(&[
            ([1.0, 0.5], 1, 2.0),
            ([-0.4, 1.0], 0, -1.0),
            ([0.3, -2.0], 1, 0.5),
            ([0.8, 0.1], 0, 1.5),
            ([-1.2, -0.7], 1, -0.3),
        ])
    }

    #[test]
    fn kl_of_a_single_step_by_hand() {
        // pi_b(1|s) = 0.5 and pi_beta(1|s) = 0.25 for s = 1, a = 1.
        let d = Dataset::new(vec![
            Trajectory::new(vec![DVector::from_vec(vec![1.0]); 2], vec![1], vec![0.0]).unwrap()
        ])
        .unwrap();
        let b = PolicyParams::zeros(1);
        let beta = PolicyParams::from_slice(&[(0.25f64 / 0.75).ln()]);
        let kl = kl_n(&MaskedPolicy::unmasked(&beta, &b).unwrap(), &b, &d).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_policies_have_zero_kl_and_mean_return() {
        let d = toy();
        let b = PolicyParams::from_slice(&[0.2, -0.1]);
        let p = MaskedPolicy::unmasked(&b, &b).unwrap();
        assert_eq!(kl_n(&p, &b, &d).unwrap(), 0.0);
        let mean = d.returns().iter().sum::<f64>() / 5.0;
        assert!((m_n(&p, &b, &d, 3.0).unwrap() - mean).abs() < 1e-14);
    }

    #[test]
    fn smooth_gradient_agrees_with_bundle() {
        let d = toy();
        let b = PolicyParams::from_slice(&[0.2, -0.1]);
        let p = MaskedPolicy::new(
            DVector::from_vec(vec![0.7, -0.4]),
            b.coefficients.clone(),
            ActiveMask::from_bools(vec![true, false]),
        )
        .unwrap();
        let s = smooth_objective(&p, &b.coefficients, &d, 1.5).unwrap();
        let bundle = derivative_bundle(&p, &b, &d, 1.5).unwrap();
        assert!((&s.gradient - &bundle.gradient).amax() < 1e-12);
        assert!((s.objective - m_n(&p, &b, &d, 1.5).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn zero_reward_fit_stays_at_behavior() {
        let d = one_step(&[
            ([1.0, 0.5], 1, 0.0),
            ([-0.4, 1.0], 0, 0.0),
            ([0.3, -2.0], 1, 0.0),
            ([0.8, 0.1], 0, 0.0),
            ([-1.2, -0.7], 1, 0.0),
        ]);
        let b = crate::behavioral::fit_mle(&d).unwrap().b_n;
        let fit = fit_trpo(&b, &d, 1.0, &ActiveMask::all(2)).unwrap();
        assert!(fit.converged);
        assert!((&fit.beta.coefficients - &b.coefficients).amax() < 1e-6);
    }

    #[test]
    fn zero_gamma_is_rejected() {
        let d = toy();
        let b = PolicyParams::zeros(2);
        assert!(matches!(fit_trpo(&b, &d, 0.0, &ActiveMask::all(2)), Err(Error::InvalidArgument(_))));
    }
}
