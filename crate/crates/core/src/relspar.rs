//! Adaptive relative-sparsity penalty: weights, proximal fit, lambda path and
//! the one-standard-error selection rule.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::behavioral::BehavioralFit;
use crate::error::{Error, Result};
use crate::inference::sandwich_for;
use crate::policy::{ActiveMask, MaskedPolicy, PolicyParams};
use crate::trajectories::Dataset;
use crate::trpo::{kl_n, smooth_objective, FitConfig};
use crate::value::{avg_treat_prob, value_of, ValueEstimate};

/// Differences below this make a coordinate's weight infinite.
pub const PIN_THRESHOLD: f64 = 1e-10;
/// `|beta_k - b_k|` above this puts coordinate `k` in the active set.
pub const ACTIVE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptiveWeights {
    /// Per-coordinate weights; `f64::INFINITY` pins the coordinate to `b`.
    pub w: Vec<f64>,
    pub delta: f64,
    pub source_pilot: PolicyParams,
}

impl AdaptiveWeights {
    pub fn is_pinned(&self, k: usize) -> bool {
        self.w[k].is_infinite()
    }

    /// Unit weights: the plain, non-adaptive relative lasso.
    pub fn uniform(pilot: &PolicyParams) -> Self {
        AdaptiveWeights { w: vec![1.0; pilot.dim()], delta: 0.0, source_pilot: pilot.clone() }
    }
}

/// `w_k = |pilot_k - b_k|^(-delta)`, infinite where the two agree.
pub fn adaptive_weights(pilot: &PolicyParams, b: &PolicyParams, delta: f64) -> Result<AdaptiveWeights> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
    }
    if pilot.dim() != b.dim() {
        return Err(Error::Dimension { expected: b.dim(), found: pilot.dim() });
    }
    let w = pilot
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(p, q)| {
            let diff = (p - q).abs();
            if diff < PIN_THRESHOLD {
                f64::INFINITY
            } else {
                diff.powf(-delta)
            }
        })
        .collect();
    Ok(AdaptiveWeights { w, delta, source_pilot: pilot.clone() })
}

fn penalty(beta: &DVector<f64>, b: &DVector<f64>, w: &[f64], lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    (0..beta.len()).filter(|&k| w[k].is_finite()).map(|k| w[k] * (beta[k] - b[k]).abs()).sum::<f64>() * lambda
}

/// Penalized objective `M_n - lambda * sum_k w_k |beta_k - b_k|`.
pub fn w_n(beta: &PolicyParams, b: &PolicyParams, d: &Dataset, gamma: f64, lambda: f64, weights: &AdaptiveWeights) -> Result<f64> {
    let p = MaskedPolicy::unmasked(beta, b)?;
    let m = crate::trpo::m_n(&p, b, d, gamma)?;
    Ok(m - penalty(&beta.coefficients, &b.coefficients, &weights.w, lambda))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelsparFit {
    pub beta: PolicyParams,
    /// Penalized objective at `beta`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl RelsparFit {
    pub fn active_set(&self, b: &PolicyParams) -> Vec<usize> {
        active_set(&self.beta, b)
    }
}

pub fn active_set(beta: &PolicyParams, b: &PolicyParams) -> Vec<usize> {
    (0..b.dim()).filter(|&k| (beta.coefficients[k] - b.coefficients[k]).abs() > ACTIVE_TOL).collect()
}

/// Iterate-change tolerance of the proximal fit.
pub const PROX_TOL: f64 = 1e-9;
const PROX_MAX_ITERS: usize = 20_000;

/// Proximal-gradient ascent on the penalized objective: a gradient step on
/// the smooth part, then soft-thresholding of `beta - b` toward zero.
pub fn fit_relspar(
    b: &PolicyParams,
    d: &Dataset,
    cfg: &FitConfig,
    weights: &AdaptiveWeights,
    warm_start: &PolicyParams,
) -> Result<RelsparFit> {
    cfg.validate()?;
    let k = d.dim();
    if b.dim() != k || warm_start.dim() != k || weights.w.len() != k {
        return Err(Error::Dimension { expected: k, found: if b.dim() != k { b.dim() } else { warm_start.dim() } });
    }
    let lambda = cfg.lambda;
    let bc = &b.coefficients;
    let pinned: Vec<bool> = (0..k).map(|j| lambda > 0.0 && weights.is_pinned(j)).collect();
    let mask = ActiveMask::all(k);
    let smooth = |x: &DVector<f64>| {
        let p = MaskedPolicy { beta: x.clone(), b: bc.clone(), mask: mask.clone() };
        smooth_objective(&p, bc, d, cfg.gamma)
    };
    let prox = |y: &DVector<f64>, t: f64| {
        DVector::from_iterator(
            k,
            (0..k).map(|j| {
                if pinned[j] {
                    return bc[j];
                }
                let thr = if lambda == 0.0 { 0.0 } else { t * lambda * weights.w[j] };
                let u = y[j] - bc[j];
                bc[j] + u.signum() * (u.abs() - thr).max(0.0)
            }),
        )
    };

    let mut x = warm_start.coefficients.clone();
    for j in 0..k {
        if pinned[j] {
            x[j] = bc[j];
        }
    }
    let mut cur = match smooth(&x) {
        Ok(s) => s,
        Err(_) => {
            // An unusable warm start falls back to the behavioral policy.
            x = bc.clone();
            smooth(&x)?
        }
    };
    let mut t = cfg.step_init;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < PROX_MAX_ITERS {
        iterations += 1;
        let mut accepted = None;
        for _ in 0..60 {
            let y = &x + &cur.gradient * t;
            let xn = prox(&y, t);
            let step = &xn - &x;
            if step.amax() <= cfg.max_coord_step {
                if let Ok(sn) = smooth(&xn) {
                    // Quadratic minorant test for an ascent step of length t.
                    let bound = cur.objective + cur.gradient.dot(&step) - step.norm_squared() / (2.0 * t);
                    if sn.objective >= bound - 1e-14 * (1.0 + cur.objective.abs()) {
                        accepted = Some((xn, sn));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        let Some((xn, sn)) = accepted else { break };
        let change = (&xn - &x).amax();
        // Barzilai-Borwein guess for the next step length.
        let s = &xn - &x;
        let y = &cur.gradient - &sn.gradient;
        let sy = s.dot(&y);
        t = if sy > 0.0 { (s.norm_squared() / sy).clamp(1e-6, 1e3) } else { (t * 2.0).min(1e3) };
        x = xn;
        cur = sn;
        if change <= PROX_TOL {
            converged = true;
            break;
        }
    }
    let objective = cur.objective - penalty(&x, bc, &weights.w, lambda);
    Ok(RelsparFit { beta: PolicyParams::new(x), objective, iterations, converged })
}

/// Largest useful lambda: at or above it the fit equals `b` exactly.
pub fn lambda_max(b: &PolicyParams, d: &Dataset, gamma: f64, weights: &AdaptiveWeights) -> Result<f64> {
    let p = MaskedPolicy::unmasked(b, b)?;
    let g = smooth_objective(&p, &b.coefficients, d, gamma)?.gradient;
    Ok((0..b.dim())
        .filter(|&k| weights.w[k].is_finite() && weights.w[k] > 0.0)
        .map(|k| g[k].abs() / weights.w[k])
        .fold(0.0, f64::max))
}

/// `count` log-spaced values from `lo` to `hi`, ascending.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0) || !(hi >= lo) || count == 0 {
        return Err(Error::InvalidArgument(format!("bad log grid: lo={lo}, hi={hi}, count={count}")));
    }
    if count == 1 {
        return Ok(vec![hi]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub beta: PolicyParams,
    pub b: PolicyParams,
    pub value_train: Option<ValueEstimate>,
    pub value_test: Option<ValueEstimate>,
    pub kl: f64,
    pub prob_sugg: f64,
    pub prob_beh: f64,
    pub prob_gap: f64,
    pub active_set: Vec<usize>,
    /// Sandwich standard error per coordinate on the active set (0 elsewhere,
    /// NaN where it could not be computed).
    pub sd_band: Vec<f64>,
    pub converged: bool,
    /// Set when the fit or one of the summaries failed at this lambda.
    pub note: Option<String>,
}

/// Warm-started sweep over `lambdas` (ascending). Fits run from the largest
/// lambda down, each started at the previous solution; the returned points
/// are in ascending lambda order.
pub fn lambda_path(
    behavioral: &BehavioralFit,
    d_train: &Dataset,
    d_test: Option<&Dataset>,
    cfg: &FitConfig,
    weights: &AdaptiveWeights,
    lambdas: &[f64],
) -> Result<Vec<PathPoint>> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    if lambdas.windows(2).any(|w| !(w[0] <= w[1])) || lambdas.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::InvalidArgument("lambda grid must be non-negative and ascending".into()));
    }
    let b = &behavioral.b_n;
    let beh = MaskedPolicy::behavioral(b);
    let prob_beh = avg_treat_prob(&beh, d_train)?;
    let mut warm = b.clone();
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas.iter().rev() {
        let c = cfg.with_lambda(lambda);
        let point = match fit_relspar(b, d_train, &c, weights, &warm) {
            Ok(fit) => {
                warm = fit.beta.clone();
                summarize(behavioral, d_train, d_test, cfg.gamma, lambda, fit.beta, fit.converged, prob_beh)
            }
            Err(e) => PathPoint {
                lambda,
                beta: warm.clone(),
                b: b.clone(),
                value_train: None,
                value_test: None,
                kl: f64::NAN,
                prob_sugg: f64::NAN,
                prob_beh,
                prob_gap: f64::NAN,
                active_set: Vec::new(),
                sd_band: vec![f64::NAN; b.dim()],
                converged: false,
                note: Some(e.to_string()),
            },
        };
        out.push(point);
    }
    out.reverse();
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn summarize(
    behavioral: &BehavioralFit,
    d_train: &Dataset,
    d_test: Option<&Dataset>,
    gamma: f64,
    lambda: f64,
    beta: PolicyParams,
    converged: bool,
    prob_beh: f64,
) -> PathPoint {
    let b = &behavioral.b_n;
    let k = b.dim();
    let active = active_set(&beta, b);
    let p = MaskedPolicy::unmasked(&beta, b).expect("dimensions checked");
    let mut notes = Vec::new();
    let value_train = value_of(&p, b, d_train).map_err(|e| notes.push(format!("train value: {e}"))).ok();
    let value_test = d_test.and_then(|dt| value_of(&p, b, dt).map_err(|e| notes.push(format!("test value: {e}"))).ok());
    let kl = kl_n(&p, b, d_train).unwrap_or(f64::NAN);
    let prob_sugg = avg_treat_prob(&p, d_train).unwrap_or(f64::NAN);
    let mut sd_band = vec![0.0; k];
    if !active.is_empty() {
        let mask = ActiveMask::from_indices(k, &active).expect("indices in range");
        let masked = MaskedPolicy { beta: beta.coefficients.clone(), b: b.coefficients.clone(), mask };
        match sandwich_for(&masked, behavioral, d_train, gamma) {
            Ok(var) => {
                for &j in &active {
                    sd_band[j] = (var[(j, j)].max(0.0) / d_train.n() as f64).sqrt();
                }
            }
            Err(e) => {
                notes.push(format!("sd band: {e}"));
                for &j in &active {
                    sd_band[j] = f64::NAN;
                }
            }
        }
    }
    PathPoint {
        lambda,
        beta,
        b: b.clone(),
        value_train,
        value_test,
        kl,
        prob_sugg,
        prob_beh,
        prob_gap: prob_sugg - prob_beh,
        active_set: active,
        sd_band,
        converged,
        note: if notes.is_empty() { None } else { Some(notes.join("; ")) },
    }
}

/// How the value threshold above behavior is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Behavioral value plus one standard error, `sd / sqrt(n)`.
    #[default]
    StandardError,
    /// Behavioral value plus the sd of `sqrt(n) V_n`.
    StandardDeviation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub index: usize,
    pub lambda: f64,
    pub v_min: f64,
    pub rule: ThresholdRule,
    /// No lambda reached `v_min`; the smallest lambda was returned instead.
    pub no_qualifying_lambda: bool,
}

/// Largest lambda whose train value reaches the behavioral value plus one
/// standard error; the smallest lambda, flagged, if none does.
pub fn select_lambda(path: &[PathPoint], v_behavioral: &ValueEstimate, rule: ThresholdRule) -> Result<LambdaSelection> {
    if path.is_empty() {
        return Err(Error::InvalidArgument("cannot select from an empty path".into()));
    }
    let v_min = v_behavioral.v_weighted
        + match rule {
            ThresholdRule::StandardError => v_behavioral.se(),
            ThresholdRule::StandardDeviation => v_behavioral.sd_weighted,
        };
    let qualifying = path
        .iter()
        .enumerate()
        .filter(|(_, p)| p.value_train.is_some_and(|v| v.v_weighted >= v_min))
        .max_by(|a, b| a.1.lambda.total_cmp(&b.1.lambda));
    Ok(match qualifying {
        Some((index, p)) => LambdaSelection { index, lambda: p.lambda, v_min, rule, no_qualifying_lambda: false },
        None => {
            let (index, p) = path.iter().enumerate().min_by(|a, b| a.1.lambda.total_cmp(&b.1.lambda)).unwrap();
            LambdaSelection { index, lambda: p.lambda, v_min, rule, no_qualifying_lambda: true }
        }
    })
}
