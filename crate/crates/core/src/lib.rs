//! Relatively sparse policy estimation from finite-horizon trajectory data.
//!
//! A suggested treatment policy is fitted by maximizing an importance-sampled
//! value estimate under a KL penalty toward the behavioral policy, with an
//! adaptive lasso penalty that keeps most coefficients equal to their
//! behavioral counterparts. Selection and inference use separate halves of
//! the data; the coefficients that were allowed to move get sandwich
//! confidence intervals that account for the estimated behavioral policy.

pub mod behavioral;
pub mod cli;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod optim;
pub mod output;
pub mod policy;
pub mod relspar;
pub mod simulate;
pub mod stats;
pub mod trajectories;
pub mod trpo;
pub mod value;

pub use behavioral::{calibration_table, fit_mle, influence_q, BehavioralFit, CalibrationBin};
pub use error::{Error, Result};
pub use inference::{
    confidence_intervals, post_select_fit, run_pipeline, sandwich_variance, InferenceResult, PipelineConfig,
    PipelineReport,
};
pub use policy::{expit, ActiveMask, MaskedPolicy, PolicyParams};
pub use relspar::{adaptive_weights, fit_relspar, lambda_path, select_lambda, AdaptiveWeights, PathPoint};
pub use simulate::{coverage_study, gen_dataset, reference_estimand, selection_study, CoverageReport, SimConfig};
pub use trajectories::{load_dataset, scale_states, split_dataset, CsvSchema, Dataset, RewardRule, SplitSpec, Trajectory};
pub use trpo::{derivative_bundle, fit_trpo, kl_n, m_n, DerivativeBundle, FitConfig, TrpoFit};
pub use value::{avg_treat_prob, is_ratios, value_variance, value_weighted, ISRatios, ValueEstimate};
