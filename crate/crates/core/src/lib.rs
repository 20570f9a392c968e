//! Semiparametric cure-rate transformation models for left-truncated,
//! right-censored data, with SIMEX correction for additive measurement error
//! in the latency covariates.

// NaN must fail these range checks, so they are written as negations.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod estimate;
pub mod link;
pub mod params;
pub mod profile;
pub mod rng;
pub mod sim;
pub mod simex;
pub mod step;
pub mod variance;

pub use config::{run_fit, FitConfig, FitFlags, FitReport, SolverConfig};
pub use data::{event_times, load_sample, read_sample, save_sample, write_sample, EventTimes, LatentRecord, Sample, Subject};
pub use estimate::{cure_score_weight, naive_fit, score_u1, score_u2, solve_theta, stacked_score, FitResult, GammaWeight, IncidenceResidual, ScoreOptions, SolverOptions};
pub use error::{Error, ErrorClass, Result, RowIssue};
pub use link::{population_survival, Family};
pub use params::ParameterVector;
pub use profile::{residual_balance, solve_profile_h, ProfileOptions, TailPolicy};
pub use step::{evaluate_h, StepFunction};
pub use simex::{
    average_over_b, extrapolate_at, fit_extrapolant, perturb_covariates, run_simex, simex_h, CovarianceSpec,
    Extrapolant, ExtrapolationModel, HCurve, NoiseSharing, SimexGrid, SimexOptions, SimexResult,
};
pub use variance::{
    bread_matrix, central_jacobian, compute_kernels, h_covariance, naive_sandwich, project_psd, theta_covariance,
    wald_interval, HVariance, InfluenceKernels, MeatForm, SandwichPieces, ThetaCovariance, VarianceOptions,
};
