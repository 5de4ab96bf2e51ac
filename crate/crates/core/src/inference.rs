//! Sandwich variance, confidence intervals, the post-selection refit and the
//! sample-splitting pipeline.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::behavioral::{fit_mle, influence_q, BehavioralFit};
use crate::error::{Error, Result};
use crate::linalg::{checked_inverse, scatter_block, serde_dmatrix, sub_matrix, sub_vector, symmetrize};
use crate::policy::{ActiveMask, MaskedPolicy, PolicyParams};
use crate::relspar::{
    adaptive_weights, lambda_max, lambda_path, log_grid, select_lambda, AdaptiveWeights, LambdaSelection, PathPoint,
    ThresholdRule,
};
use crate::stats::two_sided_critical;
use crate::trajectories::{split_dataset, Dataset, SplitSpec, DEFAULT_SPLIT_FRACTIONS};
use crate::trpo::{derivative_bundle, fit_trpo_with, DerivativeBundle, FitConfig};
use crate::value::{value_of, ValueEstimate};

/// Variance of `sqrt(n) (beta_hat - beta)` on the `active` coordinates,
/// embedded in a `K x K` matrix that is zero elsewhere:
/// `H^{-1} [(1/n) sum_i (z_i + X q_i)(z_i + X q_i)'] H^{-T}` on the active block.
pub fn sandwich_variance(bundle: &DerivativeBundle, q: &[DVector<f64>], active: &[usize]) -> Result<DMatrix<f64>> {
    let k = bundle.gradient.len();
    let n = bundle.per_trajectory_z.len();
    if q.len() != n {
        return Err(Error::Dimension { expected: n, found: q.len() });
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if active.is_empty() {
        return Ok(DMatrix::zeros(k, k));
    }
    let all: Vec<usize> = (0..k).collect();
    let h = sub_matrix(&bundle.hessian, active, active);
    let h_inv = checked_inverse(&h, "Hessian on the active coordinates")?;
    let x = sub_matrix(&bundle.cross, active, &all);
    let m = active.len();
    let mut meat = DMatrix::zeros(m, m);
    for (z, qi) in bundle.per_trajectory_z.iter().zip(q) {
        let u = sub_vector(z, active) + &x * qi;
        meat.ger(1.0, &u, &u, 1.0);
    }
    meat /= n as f64;
    let block = symmetrize(&(&h_inv * meat * h_inv.transpose()));
    Ok(scatter_block(&block, active, k))
}

/// Sandwich variance for `p` fitted on `d` with the behavioral fit as nuisance.
pub fn sandwich_for(p: &MaskedPolicy, behavioral: &BehavioralFit, d: &Dataset, gamma: f64) -> Result<DMatrix<f64>> {
    let bundle = derivative_bundle(p, &behavioral.b_n, d, gamma)?;
    let q = influence_q(behavioral)?;
    sandwich_variance(&bundle, &q, &p.mask.active_indices())
}

/// `beta_k -+ z * sqrt(variance_kk / n)` for every coordinate.
pub fn confidence_intervals(
    beta: &PolicyParams,
    variance: &DMatrix<f64>,
    n: usize,
    level: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = two_sided_critical(level)?;
    let k = beta.dim();
    if variance.nrows() != k || variance.ncols() != k {
        return Err(Error::Dimension { expected: k, found: variance.nrows() });
    }
    let half: Vec<f64> = (0..k).map(|j| z * (variance[(j, j)].max(0.0) / n as f64).sqrt()).collect();
    Ok((
        beta.as_slice().iter().zip(&half).map(|(b, h)| b - h).collect(),
        beta.as_slice().iter().zip(&half).map(|(b, h)| b + h).collect(),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceResult {
    /// Refitted coefficients; pinned coordinates equal the behavioral ones.
    pub beta: PolicyParams,
    pub mask: ActiveMask,
    /// Variance of `sqrt(n) beta` (zero off the active block).
    #[serde(with = "serde_dmatrix")]
    pub variance: DMatrix<f64>,
    pub se: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub behavioral: BehavioralFit,
    pub behavioral_se: Vec<f64>,
    pub behavioral_ci_lower: Vec<f64>,
    pub behavioral_ci_upper: Vec<f64>,
    pub gamma: f64,
    pub lambda: Option<f64>,
    pub delta: Option<f64>,
    pub level: f64,
    pub n_inference: usize,
    /// Value of the refitted policy on the inference data.
    pub value: Option<ValueEstimate>,
    pub behavioral_value: Option<ValueEstimate>,
    pub converged: bool,
    /// Whether the Hessian on the active block was negative definite.
    pub local_max_certified: bool,
}

impl InferenceResult {
    pub fn active_set(&self) -> Vec<usize> {
        self.mask.active_indices()
    }
}

/// Refit on `d` with only the `active` coordinates free and the rest pinned to
/// the behavioral MLE of the same data, then attach sandwich intervals.
pub fn post_select_fit(d: &Dataset, active: &[usize], cfg: &FitConfig, level: f64) -> Result<InferenceResult> {
    let behavioral = fit_mle(d).map_err(|e| e.in_stage("behavioral fit on inference split"))?;
    post_select_fit_with(d, active, cfg, level, behavioral)
}

pub fn post_select_fit_with(
    d: &Dataset,
    active: &[usize],
    cfg: &FitConfig,
    level: f64,
    behavioral: BehavioralFit,
) -> Result<InferenceResult> {
    cfg.validate()?;
    let k = d.dim();
    let mask = ActiveMask::from_indices(k, active)?;
    let b = behavioral.b_n.clone();
    let (bl, bu) = behavioral.wald_intervals(level)?;
    let behavioral_se = behavioral.standard_errors();
    let beh_policy = MaskedPolicy::behavioral(&b);
    let behavioral_value = value_of(&beh_policy, &b, d).ok();
    if mask.count() == 0 {
        return Ok(InferenceResult {
            beta: b.clone(),
            variance: DMatrix::zeros(k, k),
            se: vec![0.0; k],
            ci_lower: b.as_slice().to_vec(),
            ci_upper: b.as_slice().to_vec(),
            mask,
            behavioral_se,
            behavioral_ci_lower: bl,
            behavioral_ci_upper: bu,
            behavioral,
            gamma: cfg.gamma,
            lambda: None,
            delta: None,
            level,
            n_inference: d.n(),
            value: behavioral_value,
            behavioral_value,
            converged: true,
            local_max_certified: true,
        });
    }
    let fit = fit_trpo_with(&b, d, &mask, cfg).map_err(|e| e.in_stage("post-selection refit"))?;
    let policy = fit.policy(&b);
    let bundle = derivative_bundle(&policy, &b, d, cfg.gamma)?;
    let q = influence_q(&behavioral)?;
    let act = mask.active_indices();
    let variance = sandwich_variance(&bundle, &q, &act).map_err(|e| e.in_stage("sandwich variance"))?;
    let h = sub_matrix(&bundle.hessian, &act, &act);
    let local_max_certified = h.symmetric_eigenvalues().iter().all(|&e| e < 0.0);
    let (ci_lower, ci_upper) = confidence_intervals(&fit.beta, &variance, d.n(), level)?;
    let se = (0..k).map(|j| (variance[(j, j)].max(0.0) / d.n() as f64).sqrt()).collect();
    Ok(InferenceResult {
        beta: fit.beta.clone(),
        mask,
        variance,
        se,
        ci_lower,
        ci_upper,
        behavioral_se,
        behavioral_ci_lower: bl,
        behavioral_ci_upper: bu,
        behavioral,
        gamma: cfg.gamma,
        lambda: None,
        delta: None,
        level,
        n_inference: d.n(),
        value: value_of(&policy, &b, d).ok(),
        behavioral_value,
        converged: fit.converged,
        local_max_certified,
    })
}

/// How the lambda grid of each path is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaGrid {
    /// `count` log-spaced values from `ratio * lambda_max` up to `lambda_max`.
    Auto { count: usize, ratio: f64 },
    Fixed(Vec<f64>),
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::Auto { count: 10, ratio: 1e-3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub gammas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub lambdas: LambdaGrid,
    /// Use this `(gamma, delta)` instead of the automatic choice.
    pub fixed: Option<(f64, f64)>,
    /// Largest tolerated coefficient sd band for the automatic choice.
    pub band_threshold: f64,
    /// Gamma for the post-selection refit; defaults to the chosen gamma.
    pub inference_gamma: Option<f64>,
    pub threshold_rule: ThresholdRule,
    pub split_fractions: (f64, f64, f64),
    pub seed: u64,
    pub level: f64,
    pub fit: FitConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            gammas: vec![0.01, 3.0, 6.0],
            deltas: vec![0.5, 1.0, 2.0],
            lambdas: LambdaGrid::default(),
            fixed: None,
            band_threshold: 0.5,
            inference_gamma: None,
            threshold_rule: ThresholdRule::StandardError,
            split_fractions: DEFAULT_SPLIT_FRACTIONS,
            seed: 0,
            level: 0.95,
            fit: FitConfig::new(1.0),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fixed.is_none() && (self.gammas.is_empty() || self.deltas.is_empty()) {
            return Err(Error::InvalidArgument("gamma and delta grids must be non-empty".into()));
        }
        let gammas = self.fixed.map(|f| vec![f.0]).unwrap_or_else(|| self.gammas.clone());
        let deltas = self.fixed.map(|f| vec![f.1]).unwrap_or_else(|| self.deltas.clone());
        for &g in gammas.iter().chain(self.inference_gamma.iter()) {
            FitConfig { gamma: g, ..self.fit }.validate()?;
        }
        for &d in &deltas {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::InvalidArgument(format!("delta must be positive, got {d}")));
            }
        }
        match &self.lambdas {
            LambdaGrid::Auto { count, ratio } => {
                if *count == 0 || !(*ratio > 0.0 && *ratio <= 1.0) {
                    return Err(Error::InvalidArgument("auto lambda grid needs count >= 1 and ratio in (0, 1]".into()));
                }
            }
            LambdaGrid::Fixed(v) => {
                if v.is_empty() || v.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
                    return Err(Error::InvalidArgument("lambda grid must be non-empty and non-negative".into()));
                }
            }
        }
        two_sided_critical(self.level)?;
        Ok(())
    }

    fn grid_gammas(&self) -> Vec<f64> {
        let mut g = self.fixed.map(|f| vec![f.0]).unwrap_or_else(|| self.gammas.clone());
        g.sort_by(f64::total_cmp);
        g.dedup();
        g
    }

    fn grid_deltas(&self) -> Vec<f64> {
        let mut d = self.fixed.map(|f| vec![f.1]).unwrap_or_else(|| self.deltas.clone());
        d.sort_by(f64::total_cmp);
        d.dedup();
        d
    }
}

/// One `(gamma, delta)` cell of the selection grid.
#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub gamma: f64,
    pub delta: f64,
    pub pilot: PolicyParams,
    pub pilot_converged: bool,
    pub weights: AdaptiveWeights,
    pub lambdas: Vec<f64>,
    pub path: Vec<PathPoint>,
    pub selection: LambdaSelection,
    /// Largest coefficient sd band along the path (infinite if any failed).
    pub max_sd_band: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceMode {
    Fixed,
    Auto,
    /// No gamma met the band threshold; the most stable cell was used.
    AutoFallback,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageIndices {
    pub behavioral_and_path_fit: Vec<usize>,
    pub held_out_value: Vec<usize>,
    pub inference: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub split: SplitSpec,
    pub stage_indices: StageIndices,
    pub selection_behavioral: BehavioralFit,
    pub behavioral_value_train: ValueEstimate,
    pub cells: Vec<GridCell>,
    pub choice_mode: ChoiceMode,
    pub gamma: f64,
    pub delta: f64,
    pub lambda: f64,
    pub no_qualifying_lambda: bool,
    pub selected_active_set: Vec<usize>,
    pub inference: InferenceResult,
}

impl PipelineReport {
    /// Selection used only split 1 and inference only split 2, and the
    /// recorded stage inputs agree with the split.
    pub fn check_split_hygiene(&self) -> Result<()> {
        let s = &self.split;
        let mut sel = self.stage_indices.behavioral_and_path_fit.clone();
        sel.extend_from_slice(&self.stage_indices.held_out_value);
        sel.sort_unstable();
        let mut split1 = s.split1();
        split1.sort_unstable();
        if sel != split1 || self.stage_indices.inference != s.split2 {
            return Err(Error::InvalidArgument("stage inputs do not match the recorded split".into()));
        }
        if s.split2.iter().any(|i| split1.binary_search(i).is_ok()) {
            return Err(Error::InvalidArgument("selection and inference data overlap".into()));
        }
        Ok(())
    }

    pub fn cell(&self, gamma: f64, delta: f64) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.gamma == gamma && c.delta == delta)
    }
}

/// Selection on split 1 over the `(gamma, delta)` grid, returning the cells
/// and the behavioral fit they share.
pub fn selection_grid(
    d_train: &Dataset,
    d_test: Option<&Dataset>,
    cfg: &PipelineConfig,
) -> Result<(BehavioralFit, ValueEstimate, Vec<GridCell>)> {
    let behavioral = fit_mle(d_train).map_err(|e| e.in_stage("behavioral fit on split 1"))?;
    let b = &behavioral.b_n;
    let v_beh = value_of(&MaskedPolicy::behavioral(b), b, d_train).map_err(|e| e.in_stage("behavioral value"))?;
    let gammas = cfg.grid_gammas();
    let deltas = cfg.grid_deltas();
    let k = d_train.dim();
    let pilots: Vec<_> = gammas
        .par_iter()
        .map(|&g| {
            fit_trpo_with(b, d_train, &ActiveMask::all(k), &FitConfig { gamma: g, ..cfg.fit })
                .map_err(|e| e.in_stage(&format!("pilot fit at gamma={g}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, f64)> =
        (0..gammas.len()).flat_map(|gi| deltas.iter().map(move |&dl| (gi, dl))).collect();
    let cells = jobs
        .par_iter()
        .map(|&(gi, delta)| {
            let gamma = gammas[gi];
            let pilot = &pilots[gi];
            let stage = format!("path at gamma={gamma}, delta={delta}");
            let weights = adaptive_weights(&pilot.beta, b, delta).map_err(|e| e.in_stage(&stage))?;
            let fit_cfg = FitConfig { gamma, delta, ..cfg.fit };
            let lambdas = match &cfg.lambdas {
                LambdaGrid::Fixed(v) => {
                    let mut v = v.clone();
                    v.sort_by(f64::total_cmp);
                    v
                }
                LambdaGrid::Auto { count, ratio } => {
                    let top = lambda_max(b, d_train, gamma, &weights).map_err(|e| e.in_stage(&stage))?;
                    if top > 0.0 {
                        log_grid(top * ratio, top, *count)?
                    } else {
                        vec![0.0]
                    }
                }
            };
            let path =
                lambda_path(&behavioral, d_train, d_test, &fit_cfg, &weights, &lambdas).map_err(|e| e.in_stage(&stage))?;
            let selection = select_lambda(&path, &v_beh, cfg.threshold_rule)?;
            let max_sd_band = path
                .iter()
                .flat_map(|p| p.sd_band.iter())
                .map(|&s| if s.is_finite() { s } else { f64::INFINITY })
                .fold(0.0, f64::max);
            Ok(GridCell {
                gamma,
                delta,
                pilot: pilot.beta.clone(),
                pilot_converged: pilot.converged,
                weights,
                lambdas,
                path,
                selection,
                max_sd_band,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((behavioral, v_beh, cells))
}

/// Picks the cell to use: the fixed one, or the smallest gamma whose best
/// delta keeps every sd band under the threshold.
pub fn choose_cell(cells: &[GridCell], cfg: &PipelineConfig) -> (usize, ChoiceMode) {
    if cfg.fixed.is_some() {
        return (0, ChoiceMode::Fixed);
    }
    let mut gammas: Vec<f64> = cells.iter().map(|c| c.gamma).collect();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    let best_delta = |g: f64| {
        cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.gamma == g)
            .min_by(|a, b| a.1.max_sd_band.total_cmp(&b.1.max_sd_band))
            .map(|(i, _)| i)
            .unwrap()
    };
    for &g in &gammas {
        let i = best_delta(g);
        if cells[i].max_sd_band <= cfg.band_threshold {
            return (i, ChoiceMode::Auto);
        }
    }
    let i = (0..cells.len()).min_by(|&a, &b| cells[a].max_sd_band.total_cmp(&cells[b].max_sd_band)).unwrap();
    (i, ChoiceMode::AutoFallback)
}

/// Split, select on split 1, refit and infer on split 2.
pub fn run_pipeline(d: &Dataset, cfg: &PipelineConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let split = split_dataset(d.n(), cfg.seed, cfg.split_fractions).map_err(|e| e.in_stage("split"))?;
    let d_train = d.subset(&split.split1_train)?;
    let d_test = d.subset(&split.split1_test)?;
    let d_inf = d.subset(&split.split2)?;
    let (selection_behavioral, behavioral_value_train, cells) = selection_grid(&d_train, Some(&d_test), cfg)?;
    let (ci, choice_mode) = choose_cell(&cells, cfg);
    let cell = &cells[ci];
    let point = &cell.path[cell.selection.index];
    let active = point.active_set.clone();
    let inference_gamma = cfg.inference_gamma.unwrap_or(cell.gamma);
    let mut inference = post_select_fit(&d_inf, &active, &FitConfig { gamma: inference_gamma, ..cfg.fit }, cfg.level)
        .map_err(|e| e.in_stage("post-selection inference"))?;
    inference.lambda = Some(cell.selection.lambda);
    inference.delta = Some(cell.delta);
    let report = PipelineReport {
        stage_indices: StageIndices {
            behavioral_and_path_fit: split.split1_train.clone(),
            held_out_value: split.split1_test.clone(),
            inference: split.split2.clone(),
        },
        split,
        selection_behavioral,
        behavioral_value_train,
        choice_mode,
        gamma: cell.gamma,
        delta: cell.delta,
        lambda: cell.selection.lambda,
        no_qualifying_lambda: cell.selection.no_qualifying_lambda,
        selected_active_set: active,
        inference,
        cells,
    };
    report.check_split_hygiene()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(z: &[f64], h: f64, x: f64) -> DerivativeBundle {
        DerivativeBundle {
            gradient: DVector::from_element(1, z.iter().sum::<f64>() / z.len() as f64),
            hessian: DMatrix::from_element(1, 1, h),
            cross: DMatrix::from_element(1, 1, x),
            per_trajectory_z: z.iter().map(|&v| DVector::from_element(1, v)).collect(),
        }
    }

    #[test]
    fn one_dimensional_sandwich_by_hand() {
        let b = bundle(&[0.5, -1.0, 0.25], -2.0, 0.4);
        let q: Vec<_> = [1.0, -0.5, 2.0].iter().map(|&v| DVector::from_element(1, v)).collect();
        let v = sandwich_variance(&b, &q, &[0]).unwrap();
        let u = [0.5 + 0.4 * 1.0, -1.0 + 0.4 * -0.5, 0.25 + 0.4 * 2.0];
        let meat = u.iter().map(|x| x * x).sum::<f64>() / 3.0;
        assert!((v[(0, 0)] - meat / 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_cross_term_gives_the_plain_sandwich() {
        let b = bundle(&[0.5, -1.0, 0.25], -2.0, 0.0);
        let q: Vec<_> = [1.0, -0.5, 2.0].iter().map(|&v| DVector::from_element(1, v)).collect();
        let v = sandwich_variance(&b, &q, &[0]).unwrap();
        let meat = (0.25 + 1.0 + 0.0625) / 3.0;
        assert!((v[(0, 0)] - meat / 4.0).abs() < 1e-15);
    }

    #[test]
    fn interval_half_width_is_the_normal_quantile() {
        let beta = PolicyParams::from_slice(&[1.0, 2.0]);
        let var = DMatrix::from_diagonal(&DVector::from_vec(vec![100.0, 0.0]));
        let (lo, hi) = confidence_intervals(&beta, &var, 100, 0.95).unwrap();
        assert!((hi[0] - 1.0 - 1.959964).abs() < 1e-5);
        assert!((1.0 - lo[0] - 1.959964).abs() < 1e-5);
        assert_eq!((lo[1], hi[1]), (2.0, 2.0));
    }

    #[test]
    fn singular_active_hessian_is_reported() {
        let b = bundle(&[0.5, -1.0, 0.25], 0.0, 0.0);
        let q: Vec<_> = (0..3).map(|_| DVector::from_element(1, 0.0)).collect();
        assert!(matches!(sandwich_variance(&b, &q, &[0]), Err(Error::Singular(_))));
    }
}
