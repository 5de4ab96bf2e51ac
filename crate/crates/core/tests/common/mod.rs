#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use relsparse::behavioral::log_likelihood;
use relsparse::{derivative_bundle, fit_mle, m_n, ActiveMask, Dataset, MaskedPolicy, PolicyParams, Trajectory};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `n` trajectories with `steps` decisions each, Gaussian states, actions
/// drawn from `b`, Gaussian rewards.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, steps: usize, b: &[f64]) -> Dataset {
    let k = b.len();
    let trs = (0..n)
        .map(|_| {
            let states: Vec<DVector<f64>> =
                (0..=steps).map(|_| DVector::from_iterator(k, (0..k).map(|_| normal(rng)))).collect();
            let actions: Vec<u8> = states[..steps]
                .iter()
                .map(|s| {
                    let eta: f64 = s.iter().zip(b).map(|(x, c)| x * c).sum();
                    u8::from(rng.random::<f64>() < relsparse::expit(eta))
                })
                .collect();
            let rewards = (0..steps).map(|_| normal(rng)).collect();
            Trajectory::new(states, actions, rewards).unwrap()
        })
        .collect();
    Dataset::new(trs).unwrap()
}

/// Random derivative-test instance: data, behavioral coefficients, a nearby
/// suggested policy and a mask with at least one active coordinate.
pub struct Instance {
    pub d: Dataset,
    pub b: DVector<f64>,
    pub beta: DVector<f64>,
    pub mask: ActiveMask,
    pub gamma: f64,
}

pub fn random_instance(seed: u64, n: usize) -> Instance {
    let mut r = rng(seed);
    let k = r.random_range(1..=4);
    let steps = r.random_range(1..=3);
    let b: Vec<f64> = (0..k).map(|_| 0.5 * normal(&mut r)).collect();
    let d = random_dataset(&mut r, n, steps, &b);
    let beta: Vec<f64> = b.iter().map(|c| c + 0.5 * normal(&mut r)).collect();
    let mut active: Vec<bool> = (0..k).map(|_| r.random::<f64>() < 0.6).collect();
    let first = r.random_range(0..k);
    active[first] = true;
    let gamma = [0.01, 0.5, 3.0][r.random_range(0..3)];
    Instance {
        d,
        b: DVector::from_vec(b),
        beta: DVector::from_vec(beta),
        mask: ActiveMask::from_bools(active),
        gamma,
    }
}

impl Instance {
    pub fn policy(&self, beta: &DVector<f64>, b: &DVector<f64>) -> MaskedPolicy {
        MaskedPolicy { beta: beta.clone(), b: b.clone(), mask: self.mask.clone() }
    }

    pub fn objective(&self, beta: &DVector<f64>, b: &DVector<f64>) -> f64 {
        m_n(&self.policy(beta, b), &PolicyParams::new(b.clone()), &self.d, self.gamma).unwrap()
    }

    pub fn gradient(&self, beta: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        derivative_bundle(&self.policy(beta, b), &PolicyParams::new(b.clone()), &self.d, self.gamma).unwrap().gradient
    }
}

/// Central difference of a vector-valued map, one column per coordinate.
pub fn jacobian(x: &DVector<f64>, h: f64, rows: usize, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, x.len());
    for j in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        out.set_column(j, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    out
}

/// Largest entrywise difference relative to the size of the analytic object.
pub fn rel_err(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    let scale = analytic.amax().max(numeric.amax()).max(1e-8);
    (analytic - numeric).amax() / scale
}

/// Finite-difference check of gradient, Hessian and cross-derivative for
/// one instance; returns the three relative errors on the active rows.
pub fn derivative_errors(inst: &Instance) -> (f64, f64, f64) {
    let k = inst.b.len();
    let active = inst.mask.active_indices();
    let bundle =
        derivative_bundle(&inst.policy(&inst.beta, &inst.b), &PolicyParams::new(inst.b.clone()), &inst.d, inst.gamma)
            .unwrap();
    let h = 1e-5;
    let rows = |m: &DMatrix<f64>, cols: &[usize]| DMatrix::from_fn(active.len(), cols.len(), |i, j| m[(active[i], cols[j])]);
    let all: Vec<usize> = (0..k).collect();

    let fd_grad = jacobian(&inst.beta, h, 1, |x| DVector::from_element(1, inst.objective(x, &inst.b))).transpose();
    let e_j = rel_err(&rows(&DMatrix::from_column_slice(k, 1, bundle.gradient.as_slice()), &[0]), &rows(&fd_grad, &[0]));

    let fd_hess = jacobian(&inst.beta, h, k, |x| inst.gradient(x, &inst.b));
    let e_h = rel_err(&rows(&bundle.hessian, &active), &rows(&fd_hess, &active));

    let fd_cross = jacobian(&inst.b, h, k, |b| inst.gradient(&inst.beta, b));
    let e_x = rel_err(&rows(&bundle.cross, &all), &rows(&fd_cross, &all));
    (e_j, e_h, e_x)
}

/// One-decision, one-covariate dataset from `(state, action, reward)` rows.
pub fn one_step_dataset(rows: &[(f64, u8, f64)]) -> Dataset {
    let trs = rows
        .iter()
        .map(|&(s, a, r)| {
            Trajectory::new(vec![DVector::from_element(1, s), DVector::from_element(1, 0.0)], vec![a], vec![r]).unwrap()
        })
        .collect();
    Dataset::new(trs).unwrap()
}

/// Sandwich variance of `sqrt(n) beta` for a one-step, one-covariate dataset,
/// written out term by term.
pub fn hand_sandwich(rows: &[(f64, u8, f64)], beta: f64, b: f64, gamma: f64) -> f64 {
    let n = rows.len() as f64;
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut r = Vec::new();
    let mut g = Vec::new();
    let mut gb = Vec::new();
    let mut hbb = Vec::new();
    let mut ret = Vec::new();
    let mut score = Vec::new();
    let mut curv = 0.0;
    for &(s, a, rew) in rows {
        let a = a as f64;
        let (p, q) = (sig(beta * s), sig(b * s));
        let lik = |pr: f64| if a == 1.0 { pr } else { 1.0 - pr };
        r.push(lik(p) / lik(q));
        g.push((a - p) * s);
        gb.push(-(a - q) * s);
        hbb.push(-p * (1.0 - p) * s * s);
        ret.push(rew);
        score.push((a - q) * s);
        curv += q * (1.0 - q) * s * s / n;
    }
    let mean = |f: &dyn Fn(usize) -> f64| (0..rows.len()).map(f).sum::<f64>() / n;
    let bm = mean(&|i| r[i]);
    let am = mean(&|i| r[i] * ret[i]);
    let b_beta = mean(&|i| r[i] * g[i]);
    let a_beta = mean(&|i| r[i] * ret[i] * g[i]);
    let b_b = mean(&|i| r[i] * gb[i]);
    let a_b = mean(&|i| r[i] * ret[i] * gb[i]);
    let b_bb = mean(&|i| r[i] * (g[i] * g[i] + hbb[i]));
    let a_bb = mean(&|i| r[i] * ret[i] * (g[i] * g[i] + hbb[i]));
    let b_x = mean(&|i| r[i] * g[i] * gb[i]);
    let a_x = mean(&|i| r[i] * ret[i] * g[i] * gb[i]);
    let h = a_bb / bm - 2.0 * a_beta * b_beta / (bm * bm) - am * b_bb / (bm * bm)
        + 2.0 * am * b_beta * b_beta / bm.powi(3)
        + gamma * mean(&|i| hbb[i]);
    let x = a_x / bm - a_beta * b_b / (bm * bm) - b_beta * a_b / (bm * bm) - am * b_x / (bm * bm)
        + 2.0 * am * b_beta * b_b / bm.powi(3);
    let meat = mean(&|i| {
        let z = r[i] * ret[i] * g[i] / bm - r[i] * ret[i] * b_beta / (bm * bm) + gamma * g[i];
        let u = z + x * score[i] / curv;
        u * u
    });
    meat / (h * h)
}

/// Argmax of the objective over a coarse grid, then a fine grid around it.
pub fn grid_argmax(d: &Dataset, b: &PolicyParams, gamma: f64, center: [f64; 2], half: f64) -> [f64; 2] {
    let f = |x: f64, y: f64| {
        let p = MaskedPolicy::unmasked(&PolicyParams::from_slice(&[x, y]), b).unwrap();
        m_n(&p, b, d, gamma).unwrap_or(f64::NEG_INFINITY)
    };
    let search = |c: [f64; 2], half: f64, step: f64| {
        let m = (half / step).round() as i64;
        let mut best = (f64::NEG_INFINITY, c);
        for i in -m..=m {
            for j in -m..=m {
                let (x, y) = (c[0] + i as f64 * step, c[1] + j as f64 * step);
                let v = f(x, y);
                if v > best.0 {
                    best = (v, [x, y]);
                }
            }
        }
        best.1
    };
    let coarse = search(center, half, 0.02);
    search(coarse, 0.04, 0.002)
}

pub fn grid_instance() -> (Dataset, PolicyParams) {
    let d = random_dataset(&mut rng(42), 50, 3, &[-0.3, 0.2]);
    let b = fit_mle(&d).unwrap().b_n;
    (d, b)
}

/// Pattern search on the log-likelihood with a shrinking step.
pub fn brute_force_mle(d: &Dataset, k: usize) -> Vec<f64> {
    let mut x = vec![0.0; k];
    let mut fx = log_likelihood(d, &PolicyParams::from_slice(&x));
    let mut step = 1.0;
    while step > 1e-9 {
        let mut moved = false;
        for j in 0..k {
            for dir in [1.0, -1.0] {
                let mut y = x.clone();
                y[j] += dir * step;
                let fy = log_likelihood(d, &PolicyParams::from_slice(&y));
                if fy > fx {
                    (x, fx, moved) = (y, fy, true);
                }
            }
        }
        if !moved {
            step /= 2.0;
        }
    }
    x
}

pub const HAND_ROWS: [(f64, u8, f64); 3] = [(1.0, 1, 1.0), (2.0, 0, -0.5), (-1.0, 1, 2.0)];


pub const ICU_COVARIATES: [&str; 9] =
    ["MAP", "HR", "urine", "lactate", "GCS", "creatinine", "FiO2", "bilirubin", "platelets"];

/// Nine-covariate trajectories laid out like an ICU extract: named state
/// columns, a binary treatment column `a` and no reward column.
pub fn write_icu_like_csv(path: &std::path::Path, n: usize, seed: u64) {
    let b0 = vec![-0.07, 0.05, -0.3, 0.43, -0.59, 0.19, 0.12, 0.03, -0.06];
    let cfg = relsparse::SimConfig::with_coefficients(n, 4, b0, seed);
    let d = relsparse::gen_dataset(&cfg).unwrap();
    let mut w = csv::Writer::from_path(path).unwrap();
    let mut header = vec!["id".to_string(), "t".to_string()];
    header.extend(ICU_COVARIATES.iter().map(|s| s.to_string()));
    header.push("a".into());
    w.write_record(&header).unwrap();
    for (i, tr) in d.trajectories.iter().enumerate() {
        for (t, s) in tr.states.iter().enumerate() {
            let mut rec = vec![format!("p{i:05}"), t.to_string()];
            rec.extend(s.iter().map(|v| format!("{v:.6}")));
            rec.push(tr.actions.get(t).map_or(String::new(), |a| a.to_string()));
            w.write_record(&rec).unwrap();
        }
    }
    w.flush().unwrap();
}
