//! Trajectory simulator with constant state variance, the known-reward
//! reference estimand, and Monte-Carlo coverage and selection studies.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::behavioral::fit_mle;
use crate::error::{Error, Result};
use crate::inference::{choose_cell, post_select_fit_with, selection_grid, PipelineConfig};
use crate::optim::bfgs_ascent;
use crate::policy::{expit, log_prob_from_linear, ActiveMask, MaskedPolicy, PolicyParams};
use crate::stats::{mean, sample_sd};
use crate::trajectories::{split_dataset, Dataset, Trajectory};
use crate::trpo::FitConfig;

/// Stream reserved for the reference dataset; replications use `0..`.
const REFERENCE_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    /// Last decision time; trajectories have `horizon + 1` decisions.
    pub horizon: usize,
    pub k: usize,
    pub b0: Vec<f64>,
    pub tau: Vec<f64>,
    pub sigma_eps: Vec<f64>,
    pub mu0: Vec<f64>,
    /// 1-based state component `j` in the reward `-s_{t,j} a_t`.
    pub reward_component: usize,
    pub seed: u64,
}

impl SimConfig {
    /// Two covariates, `b0 = (-0.3, 0.2)`, three decisions, unit noise.
    pub fn standard(n: usize, seed: u64) -> Self {
        SimConfig::with_coefficients(n, 2, vec![-0.3, 0.2], seed)
    }

    pub fn with_coefficients(n: usize, horizon: usize, b0: Vec<f64>, seed: u64) -> Self {
        let k = b0.len();
        SimConfig {
            n,
            horizon,
            k,
            b0,
            tau: vec![0.1; k],
            sigma_eps: vec![1.0; k],
            mu0: vec![1.0; k],
            reward_component: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be positive".into()));
        }
        for (name, len) in [("b0", self.b0.len()), ("tau", self.tau.len()), ("sigma_eps", self.sigma_eps.len()), ("mu0", self.mu0.len())] {
            if len != self.k {
                return Err(Error::InvalidArgument(format!("{name} has length {len}, expected K = {}", self.k)));
            }
        }
        if self.reward_component == 0 || self.reward_component > self.k {
            return Err(Error::InvalidArgument(format!(
                "the reward -s_{{t,{j}}} a_t needs state component {j}, but K = {k}",
                j = self.reward_component,
                k = self.k
            )));
        }
        if self.sigma_eps.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("sigma_eps must be positive".into()));
        }
        if self.b0.iter().chain(&self.tau).chain(&self.mu0).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("simulation parameters must be finite".into()));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// `mu_{t+1} = mu_t (1 + tau a_t)` for each action in turn, starting at `mu0`.
pub fn mean_path(mu0: &[f64], tau: &[f64], actions: &[u8]) -> Vec<Vec<f64>> {
    let mut out = vec![mu0.to_vec()];
    for &a in actions {
        let last = out.last().unwrap();
        out.push(last.iter().zip(tau).map(|(m, t)| m * (1.0 + t * a as f64)).collect());
    }
    out
}

fn gen_trajectory<R: Rng>(cfg: &SimConfig, noise: &[Normal<f64>], rng: &mut R) -> Trajectory {
    let k = cfg.k;
    let j = cfg.reward_component - 1;
    let b0 = DVector::from_column_slice(&cfg.b0);
    let mut s = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let mut mu = cfg.mu0.clone();
    let mut states = Vec::with_capacity(cfg.horizon + 2);
    let mut actions = Vec::with_capacity(cfg.horizon + 1);
    let mut rewards = Vec::with_capacity(cfg.horizon + 1);
    for _ in 0..=cfg.horizon {
        let a = u8::from(rng.random::<f64>() < expit(b0.dot(&s)));
        let next_mu: Vec<f64> = mu.iter().zip(&cfg.tau).map(|(m, t)| m * (1.0 + t * a as f64)).collect();
        let next = DVector::from_iterator(
            k,
            (0..k).map(|c| {
                let eps = noise[c].sample(rng);
                (s[c] - mu[c] + eps) / (1.0 + cfg.sigma_eps[c].powi(2)).sqrt() + next_mu[c]
            }),
        );
        rewards.push(-s[j] * a as f64);
        actions.push(a);
        states.push(std::mem::replace(&mut s, next));
        mu = next_mu;
    }
    states.push(s);
    Trajectory { states, actions, rewards }
}

fn gen_with_rng<R: Rng>(cfg: &SimConfig, n: usize, rng: &mut R) -> Result<Dataset> {
    cfg.validate()?;
    let noise: Vec<Normal<f64>> = cfg
        .sigma_eps
        .iter()
        .map(|&s| Normal::new(1.0, s).map_err(|e| Error::InvalidArgument(e.to_string())))
        .collect::<Result<_>>()?;
    let trs = (0..n).map(|_| gen_trajectory(cfg, &noise, rng)).collect();
    let mut d = Dataset::new(trs)?;
    d.seed_tag = Some(format!("simulate:seed={}", cfg.seed));
    Ok(d)
}

/// `cfg.n` trajectories, deterministic in `cfg.seed`.
pub fn gen_dataset(cfg: &SimConfig) -> Result<Dataset> {
    gen_with_rng(cfg, cfg.n, &mut cfg.rng(0))
}

/// Dataset for replication `rep` of a study: an independent stream of the seed.
pub fn gen_replication(cfg: &SimConfig, rep: u64) -> Result<Dataset> {
    let mut d = gen_with_rng(cfg, cfg.n, &mut cfg.rng(rep))?;
    d.seed_tag = Some(format!("simulate:seed={},replication={rep}", cfg.seed));
    Ok(d)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceEstimate {
    pub beta: PolicyParams,
    /// Behavioral MLE of the reference dataset.
    pub b_ref: PolicyParams,
    pub mask: ActiveMask,
    pub gamma: f64,
    pub n_ref: usize,
    pub converged: bool,
}

/// Maximizer of the known-reward value minus `gamma` times the KL to the
/// behavioral MLE, both computed on a fresh dataset of `n_ref` trajectories.
/// The known expected reward replaces importance weighting.
pub fn reference_estimand(cfg: &SimConfig, gamma: f64, n_ref: usize, mask: &ActiveMask) -> Result<ReferenceEstimate> {
    let d = gen_with_rng(cfg, n_ref, &mut cfg.rng(REFERENCE_STREAM))?;
    reference_on_dataset(&d, cfg.reward_component, gamma, mask)
}

/// The same known-reward maximizer computed on a given dataset, for a reward
/// `-s_{t,j} a_t` with 1-based component `j`.
pub fn reference_on_dataset(d: &Dataset, reward_component: usize, gamma: f64, mask: &ActiveMask) -> Result<ReferenceEstimate> {
    let fit_cfg = FitConfig::new(gamma);
    fit_cfg.validate()?;
    let k = d.dim();
    if mask.len() != k {
        return Err(Error::Dimension { expected: k, found: mask.len() });
    }
    if reward_component == 0 || reward_component > k {
        return Err(Error::InvalidArgument(format!("reward component {reward_component} out of range for K = {k}")));
    }
    let b = fit_mle(d).map_err(|e| e.in_stage("reference behavioral fit"))?.b_n;
    let j = reward_component - 1;
    let nf = d.n() as f64;
    let objective = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let p = MaskedPolicy { beta: x.clone(), b: b.coefficients.clone(), mask: mask.clone() };
        let mut value = 0.0;
        let mut kl = 0.0;
        let mut grad = DVector::zeros(k);
        for tr in &d.trajectories {
            for (s, a) in tr.decisions() {
                let eta = p.linear_unchecked(s);
                let pi = expit(eta);
                value -= s[j] * pi;
                kl += log_prob_from_linear(b.coefficients.dot(s), a) - log_prob_from_linear(eta, a);
                let dv = -s[j] * pi * (1.0 - pi);
                let resid = a as f64 - pi;
                for c in 0..k {
                    if mask.is_active(c) {
                        grad[c] += (dv + gamma * resid) * s[c];
                    }
                }
            }
        }
        Ok(((value - gamma * kl) / nf, grad / nf))
    };
    let r = bfgs_ascent(&b.coefficients, &mask.active_indices(), objective, &fit_cfg.ascent_options())?;
    Ok(ReferenceEstimate {
        beta: PolicyParams::new(r.x),
        b_ref: b,
        mask: mask.clone(),
        gamma,
        n_ref: d.n(),
        converged: r.converged,
    })
}

/// Summary of a coverage study for one coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// 1-based coordinate.
    pub coordinate: usize,
    pub gamma: f64,
    pub true_beta: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Monte-Carlo sd of `sqrt(n) beta_hat`.
    pub true_sd: f64,
    /// Square root of the mean estimated variance of `sqrt(n) beta_hat`.
    pub mean_estimated_sd: f64,
    pub coverage: f64,
    pub mean_ci_length: f64,
    /// Successful replications.
    pub replications: usize,
    pub failed: usize,
    /// Replications whose refit stopped short of the gradient tolerance.
    pub not_converged: usize,
    pub n: usize,
    pub level: f64,
}

#[derive(Debug, Clone)]
pub struct CoverageOptions {
    pub replications: usize,
    pub level: f64,
    pub n_ref: usize,
    /// Use this reference instead of computing one.
    pub reference: Option<PolicyParams>,
    pub fit: FitConfig,
}

impl CoverageOptions {
    pub fn new(replications: usize) -> Self {
        CoverageOptions { replications, level: 0.95, n_ref: 100_000, reference: None, fit: FitConfig::new(1.0) }
    }
}

/// Per-replication output of the coverage study.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageDraw {
    pub beta: Vec<f64>,
    pub variance_diag: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub converged: bool,
}

/// Fresh dataset per replication, behavioral MLE, masked refit on `active`
/// and sandwich intervals, checked against the reference estimand.
pub fn coverage_study(
    cfg: &SimConfig,
    gamma: f64,
    active: &[usize],
    opts: &CoverageOptions,
) -> Result<(Vec<CoverageReport>, Vec<Option<CoverageDraw>>)> {
    if opts.replications < 2 {
        return Err(Error::InvalidArgument("a coverage study needs at least 2 replications".into()));
    }
    if active.is_empty() {
        return Err(Error::InvalidArgument("coverage needs at least one active coordinate".into()));
    }
    let mask = ActiveMask::from_indices(cfg.k, active)?;
    let fit_cfg = FitConfig { gamma, ..opts.fit };
    fit_cfg.validate()?;
    let reference = match &opts.reference {
        Some(r) => r.clone(),
        None => reference_estimand(cfg, gamma, opts.n_ref, &mask)?.beta,
    };
    let draws: Vec<Option<CoverageDraw>> = (0..opts.replications as u64)
        .into_par_iter()
        .map(|rep| {
            let d = gen_replication(cfg, rep).ok()?;
            let beh = fit_mle(&d).ok()?;
            let res = post_select_fit_with(&d, active, &fit_cfg, opts.level, beh).ok()?;
            Some(CoverageDraw {
                beta: res.beta.as_slice().to_vec(),
                variance_diag: (0..cfg.k).map(|j| res.variance[(j, j)]).collect(),
                ci_lower: res.ci_lower,
                ci_upper: res.ci_upper,
                converged: res.converged,
            })
        })
        .collect();
    let ok: Vec<&CoverageDraw> = draws.iter().flatten().collect();
    let failed = draws.len() - ok.len();
    let sqrt_n = (cfg.n as f64).sqrt();
    let reports = mask
        .active_indices()
        .into_iter()
        .map(|j| {
            let est: Vec<f64> = ok.iter().map(|d| d.beta[j]).collect();
            let scaled: Vec<f64> = est.iter().map(|b| b * sqrt_n).collect();
            let truth = reference.coefficients[j];
            let covered = ok.iter().filter(|d| d.ci_lower[j] <= truth && truth <= d.ci_upper[j]).count();
            let m = ok.len().max(1) as f64;
            let mean_estimate = if ok.is_empty() { f64::NAN } else { mean(&est) };
            CoverageReport {
                coordinate: j + 1,
                gamma,
                true_beta: truth,
                mean_estimate,
                bias: mean_estimate - truth,
                true_sd: if ok.len() >= 2 { sample_sd(&scaled) } else { f64::NAN },
                mean_estimated_sd: (ok.iter().map(|d| d.variance_diag[j]).sum::<f64>() / m).sqrt(),
                coverage: covered as f64 / m,
                mean_ci_length: ok.iter().map(|d| d.ci_upper[j] - d.ci_lower[j]).sum::<f64>() / m,
                replications: ok.len(),
                failed,
                not_converged: ok.iter().filter(|d| !d.converged).count(),
                n: cfg.n,
                level: opts.level,
            }
        })
        .collect();
    Ok((reports, draws))
}

/// Monte-Carlo average of one path position across replications.
#[derive(Debug, Clone, Serialize)]
pub struct AveragedPoint {
    pub lambda: f64,
    pub mean_beta: Vec<f64>,
    /// Empirical sd of the coefficients across replications.
    pub sd_beta: Vec<f64>,
    /// Mean of the per-replication sandwich bands.
    pub mean_sd_band: Vec<f64>,
    pub mean_b: Vec<f64>,
    pub mean_v_train: f64,
    pub sd_v_train: f64,
    pub mean_v_train_se: f64,
    pub mean_v_test: f64,
    pub mean_kl: f64,
    pub mean_prob_sugg: f64,
    pub mean_prob_beh: f64,
    /// Fraction of replications in which each coordinate was active.
    pub active_frequency: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AveragedCell {
    pub gamma: f64,
    pub delta: f64,
    pub points: Vec<AveragedPoint>,
    /// Fraction of replications in which the rule picked each path position.
    pub selected_index_frequency: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionStudy {
    pub cells: Vec<AveragedCell>,
    /// Active set chosen in each successful replication (0-based indices).
    pub selected_sets: Vec<Vec<usize>>,
    /// `(gamma, delta)` picked in each successful replication.
    pub chosen_cells: Vec<(f64, f64)>,
    pub replications: usize,
    pub failed: usize,
}

impl SelectionStudy {
    /// Fraction of successful replications selecting exactly `set` (0-based).
    /// Most frequently chosen `(gamma, delta)` cell.
    pub fn modal_cell(&self) -> Option<(f64, f64)> {
        let mut best: Option<((f64, f64), usize)> = None;
        for c in &self.chosen_cells {
            let count = self.chosen_cells.iter().filter(|x| *x == c).count();
            if best.is_none_or(|(_, n)| count > n) {
                best = Some((*c, count));
            }
        }
        best.map(|(c, _)| c)
    }

    pub fn frequency_of(&self, set: &[usize]) -> f64 {
        if self.selected_sets.is_empty() {
            return 0.0;
        }
        self.selected_sets.iter().filter(|s| s.as_slice() == set).count() as f64 / self.selected_sets.len() as f64
    }
}

/// Split-1 selection repeated over fresh datasets, averaged position by
/// position along each path.
pub fn selection_study(cfg: &SimConfig, grids: &PipelineConfig, replications: usize) -> Result<SelectionStudy> {
    if replications == 0 {
        return Err(Error::InvalidArgument("selection study needs at least one replication".into()));
    }
    grids.validate()?;
    let runs: Vec<Option<_>> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| {
            let d = gen_replication(cfg, rep).ok()?;
            let split = split_dataset(d.n(), grids.seed.wrapping_add(rep), grids.split_fractions).ok()?;
            let train = d.subset(&split.split1_train).ok()?;
            let test = d.subset(&split.split1_test).ok()?;
            let (_, _, cells) = selection_grid(&train, Some(&test), grids).ok()?;
            let (ci, _) = choose_cell(&cells, grids);
            let chosen = cells[ci].path[cells[ci].selection.index].active_set.clone();
            let cell = (cells[ci].gamma, cells[ci].delta);
            Some((cells, chosen, cell))
        })
        .collect();
    let ok: Vec<_> = runs.iter().flatten().collect();
    let failed = runs.len() - ok.len();
    let k = cfg.k;
    let mut cells_out = Vec::new();
    if let Some((first, _, _)) = ok.first() {
        for (ci, cell) in first.iter().enumerate() {
            let len = cell.path.len();
            let mut sel_freq = vec![0.0; len];
            for (cells, _, _) in &ok {
                sel_freq[cells[ci].selection.index] += 1.0 / ok.len() as f64;
            }
            let points = (0..len)
                .map(|pi| {
                    let pts: Vec<_> = ok.iter().map(|(cells, _, _)| &cells[ci].path[pi]).collect();
                    let col = |f: &dyn Fn(&crate::relspar::PathPoint) -> f64| -> Vec<f64> {
                        pts.iter().map(|p| f(p)).filter(|v| v.is_finite()).collect()
                    };
                    let avg = |v: Vec<f64>| if v.is_empty() { f64::NAN } else { mean(&v) };
                    let sd = |v: Vec<f64>| if v.len() < 2 { f64::NAN } else { sample_sd(&v) };
                    AveragedPoint {
                        lambda: avg(col(&|p| p.lambda)),
                        mean_beta: (0..k).map(|j| avg(col(&|p| p.beta.coefficients[j]))).collect(),
                        sd_beta: (0..k).map(|j| sd(col(&|p| p.beta.coefficients[j]))).collect(),
                        mean_sd_band: (0..k).map(|j| avg(col(&|p| p.sd_band[j]))).collect(),
                        mean_b: (0..k).map(|j| avg(col(&|p| p.b.coefficients[j]))).collect(),
                        mean_v_train: avg(col(&|p| p.value_train.map_or(f64::NAN, |v| v.v_weighted))),
                        sd_v_train: sd(col(&|p| p.value_train.map_or(f64::NAN, |v| v.v_weighted))),
                        mean_v_train_se: avg(col(&|p| p.value_train.map_or(f64::NAN, |v| v.se()))),
                        mean_v_test: avg(col(&|p| p.value_test.map_or(f64::NAN, |v| v.v_weighted))),
                        mean_kl: avg(col(&|p| p.kl)),
                        mean_prob_sugg: avg(col(&|p| p.prob_sugg)),
                        mean_prob_beh: avg(col(&|p| p.prob_beh)),
                        active_frequency: (0..k)
                            .map(|j| pts.iter().filter(|p| p.active_set.contains(&j)).count() as f64 / pts.len() as f64)
                            .collect(),
                        count: pts.len(),
                    }
                })
                .collect();
            cells_out.push(AveragedCell { gamma: cell.gamma, delta: cell.delta, points, selected_index_frequency: sel_freq });
        }
    }
    Ok(SelectionStudy {
        cells: cells_out,
        selected_sets: ok.iter().map(|(_, s, _)| s.clone()).collect(),
        chosen_cells: ok.iter().map(|(_, _, c)| *c).collect(),
        replications: ok.len(),
        failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_path_by_hand() {
        let mu = mean_path(&[1.0], &[0.1], &[1, 1]);
        assert!((mu[1][0] - 1.1).abs() < 1e-15);
        assert!((mu[2][0] - 1.21).abs() < 1e-15);
        let mu = mean_path(&[1.0], &[0.1], &[0, 1]);
        assert_eq!(mu[1][0], 1.0);
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = SimConfig::standard(20, 7);
        let a = gen_dataset(&cfg).unwrap();
        let b = gen_dataset(&cfg).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
        assert_eq!(a.n(), 20);
        assert_eq!(a.steps(), 3);
        let other = gen_dataset(&SimConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.trajectories, other.trajectories);
    }

    #[test]
    fn reward_is_minus_second_component_when_treated() {
        let d = gen_dataset(&SimConfig::standard(10, 3)).unwrap();
        for tr in &d.trajectories {
            for t in 0..tr.actions.len() {
                assert_eq!(tr.rewards[t], -tr.states[t][1] * tr.actions[t] as f64);
            }
        }
    }

    #[test]
    fn one_covariate_cannot_use_the_default_reward() {
        let cfg = SimConfig::with_coefficients(5, 2, vec![0.1], 0);
        let err = gen_dataset(&cfg).unwrap_err();
        assert!(err.to_string().contains("component 2"));
    }
}
