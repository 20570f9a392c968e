//! Fit configuration and the end-to-end fitting pipeline behind `fit`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::estimate::{FitResult, GammaWeight, IncidenceResidual, Problem, ScoreOptions, SolverOptions};
use crate::link::Family;
use crate::params::ParameterVector;
use crate::profile::{ProfileOptions, TailPolicy};
use crate::simex::{
    extrapolate_at, run_simex_from, simex_h, CovarianceSpec, Extrapolant, NoiseSharing, SimexGrid, SimexOptions,
    SimexResult,
};
use crate::variance::{h_covariance, naive_sandwich, theta_covariance, wald_interval, MeatForm, VarianceOptions};

fn default_zeta_max() -> f64 {
    2.0
}
fn default_zeta_step() -> f64 {
    0.25
}
fn default_b() -> usize {
    50
}
fn default_level() -> f64 {
    0.95
}
fn default_max_fail() -> f64 {
    0.2
}

/// Root-finder settings exposed in configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub fd_step: f64,
    pub max_halvings: usize,
    pub stall_limit: usize,
    pub max_step: f64,
    pub restarts: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = SolverOptions::default();
        Self {
            tol: d.tol,
            max_iter: d.max_iter,
            fd_step: d.fd_step,
            max_halvings: d.max_halvings,
            stall_limit: d.stall_limit,
            max_step: d.max_step,
            restarts: d.restarts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub model: Family,
    #[serde(default = "default_zeta_max")]
    pub zeta_max: f64,
    #[serde(default = "default_zeta_step")]
    pub zeta_step: f64,
    #[serde(default = "default_b", rename = "B")]
    pub b: usize,
    #[serde(default)]
    pub sigma_eta: CovarianceSpec,
    #[serde(default)]
    pub sigma_is_sd: bool,
    #[serde(default)]
    pub extrapolant: Extrapolant,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gamma_weight: GammaWeight,
    #[serde(default)]
    pub incidence_residual: IncidenceResidual,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub tail: TailPolicy,
    #[serde(default)]
    pub noise_sharing: NoiseSharing,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub meat: MeatForm,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Share of non-converged `(b, zeta)` fits tolerated before failing.
    #[serde(default = "default_max_fail")]
    pub max_fail_fraction: f64,
    /// Times at which to report `H`; defaults to the event times.
    #[serde(default)]
    pub h_grid: Option<Vec<f64>>,
}

impl FitConfig {
    pub fn new(model: Family) -> Self {
        serde_json::from_value(serde_json::json!({ "model": model })).expect("defaults deserialize")
    }

    pub fn score_options(&self) -> ScoreOptions {
        ScoreOptions {
            gamma_weight: self.gamma_weight,
            incidence: self.incidence_residual,
            profile: ProfileOptions { tail: self.tail, ..ProfileOptions::default() },
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        let s = self.solver;
        SolverOptions {
            tol: s.tol,
            max_iter: s.max_iter,
            fd_step: s.fd_step,
            max_halvings: s.max_halvings,
            stall_limit: s.stall_limit,
            max_step: s.max_step,
            restarts: s.restarts,
            score: self.score_options(),
        }
    }

    pub fn simex_options(&self) -> SimexOptions {
        SimexOptions {
            extrapolant: self.extrapolant,
            solver: self.solver_options(),
            noise_sharing: self.noise_sharing,
            max_fail_fraction: self.max_fail_fraction,
        }
    }

    pub fn variance_options(&self) -> VarianceOptions {
        VarianceOptions { meat: self.meat, ..VarianceOptions::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if !(0.0..=1.0).contains(&self.max_fail_fraction) {
            return Err(Error::Config("max_fail_fraction must lie in [0, 1]".into()));
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::Config(format!("tau must be positive and finite, got {tau}")));
            }
        }
        let s = self.solver;
        if !(s.tol > 0.0 && s.fd_step > 0.0 && s.max_step > 0.0) || s.max_iter == 0 {
            return Err(Error::Config("solver tol, fd_step, max_step and max_iter must be positive".into()));
        }
        SimexGrid::uniform(self.zeta_max, self.zeta_step, self.b, nalgebra::DMatrix::zeros(1, 1))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub theta: ParameterVector,
    pub converged: bool,
    pub score_norm: f64,
    pub iterations: usize,
}

impl From<&FitResult> for FitSummary {
    fn from(f: &FitResult) -> Self {
        Self { theta: f.theta_hat.clone(), converged: f.converged, score_norm: f.score_norm, iterations: f.iterations }
    }
}

/// One point of the extrapolation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub zeta: f64,
    /// `b`-average of the converged fits; absent when none converged.
    pub theta: Option<Vec<f64>>,
    pub n_converged: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationTrace {
    pub extrapolant: Extrapolant,
    pub points: Vec<TracePoint>,
    /// Per coordinate, `(Gamma_0, Gamma_1, ...)`.
    pub coefficients: Vec<Vec<f64>>,
    /// `phi(-1, Gamma_hat)`.
    pub at_minus_one: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceBlock {
    pub level: f64,
    pub covariance: Vec<Vec<f64>>,
    pub standard_errors: Vec<f64>,
    pub intervals: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default, with = "lenient_floats::option")]
    pub h_variance: Option<Vec<f64>>,
}

/// `values` may hold `-inf` before the first event and `+inf` past a
/// saturated tail; those are written as the strings "-inf" / "inf".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HBlock {
    pub times: Vec<f64>,
    #[serde(with = "lenient_floats")]
    pub values: Vec<f64>,
}

mod lenient_floats {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
        Null(()),
    }

    fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else if v.is_nan() {
            Repr::Text("nan".into())
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Null(()) => Ok(f64::NAN),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("expected a number, \"inf\", \"-inf\" or \"nan\", got {other:?}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&x| to_repr(x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
            match Option::<Vec<Repr>>::deserialize(d)? {
                Some(v) => v.into_iter().map(from_repr::<D::Error>).collect::<Result<_, _>>().map(Some),
                None => Ok(None),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceInfo {
    pub naive_converged: bool,
    pub simex_failed: usize,
    pub simex_total: usize,
    pub warnings: Vec<String>,
}

/// Everything `fit` writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: Family,
    pub n: usize,
    pub n_events: usize,
    pub coordinates: Vec<String>,
    pub theta_naive: FitSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_simex: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<ExtrapolationTrace>,
    pub h: HBlock,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance: Option<VarianceBlock>,
    pub convergence: ConvergenceInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FitFlags {
    pub naive_only: bool,
    pub no_variance: bool,
}

pub fn coordinate_names(p: usize, q: usize) -> Vec<String> {
    let name = |base: &str, k: usize, len: usize| if len == 1 { base.to_string() } else { format!("{base}{}", k + 1) };
    (0..p).map(|k| name("beta", k, p)).chain((0..q).map(|k| name("gamma", k, q))).collect()
}

fn variance_block(
    theta: &[f64],
    cov: &nalgebra::DMatrix<f64>,
    level: f64,
    h_variance: Option<Vec<f64>>,
) -> Result<VarianceBlock> {
    let intervals = wald_interval(theta, cov, level)?;
    Ok(VarianceBlock {
        level,
        covariance: (0..cov.nrows()).map(|r| cov.row(r).iter().copied().collect()).collect(),
        standard_errors: cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
        intervals: intervals.into_iter().map(|(a, b)| [a, b]).collect(),
        h_variance,
    })
}

fn trace_of(result: &SimexResult) -> ExtrapolationTrace {
    let points = result
        .zetas
        .iter()
        .enumerate()
        .map(|(m, &zeta)| {
            let ok = result.fits[m].iter().filter(|f| f.converged).count();
            TracePoint {
                zeta,
                theta: result.theta_by_zeta[m].as_ref().map(|t| t.to_vector().iter().copied().collect()),
                n_converged: ok,
                n_failed: result.fits[m].len() - ok,
            }
        })
        .collect();
    ExtrapolationTrace {
        extrapolant: result.model.extrapolant,
        points,
        coefficients: result.model.coefficients.clone(),
        at_minus_one: extrapolate_at(&result.model, -1.0),
    }
}

/// Naive fit, then (unless `naive_only`) SIMEX, stage-4 `H` and the
/// variance blocks.
pub fn run_fit(sample: &Sample, cfg: &FitConfig, flags: FitFlags) -> Result<FitReport> {
    cfg.validate()?;
    let sample = match cfg.tau {
        Some(tau) => sample.truncate_at(tau)?,
        None => sample.clone(),
    };
    let family = cfg.model;
    let w = sample.w_matrix();
    let problem = Problem::new(&sample, &w, family, cfg.score_options())?;
    let (naive, naive_levels) = problem.solve(&ParameterVector::zeros(sample.p(), sample.q()), &cfg.solver_options())?;
    let mut warnings = Vec::new();
    if !naive.converged {
        let msg = format!("naive fit did not converge (|U| = {:.3e})", naive.score_norm);
        warn!("{msg}");
        warnings.push(msg);
    }
    let grid_times = cfg.h_grid.clone().unwrap_or_else(|| sample.grid().times().to_vec());
    let coordinates = coordinate_names(sample.p(), sample.q());
    let vopts = cfg.variance_options();

    if flags.naive_only {
        let variance = if flags.no_variance {
            None
        } else {
            let cov = naive_sandwich(&sample, &w, &naive.theta_hat, &naive.h_hat, family, &cfg.score_options(), &vopts)?;
            let theta: Vec<f64> = naive.theta_hat.to_vector().iter().copied().collect();
            Some(variance_block(&theta, &cov, cfg.level, None)?)
        };
        return Ok(FitReport {
            model: family,
            n: sample.n(),
            n_events: sample.grid().n_events(),
            coordinates,
            theta_naive: (&naive).into(),
            theta_simex: None,
            trace: None,
            h: HBlock { values: grid_times.iter().map(|&t| naive.h_hat.evaluate(t)).collect(), times: grid_times },
            variance,
            convergence: ConvergenceInfo { naive_converged: naive.converged, simex_failed: 0, simex_total: 0, warnings },
        });
    }

    if !naive.converged {
        return Err(Error::SimexConvergence { failed: cfg.b, total: cfg.b, worst_zeta: 0.0 });
    }
    let sigma = cfg.sigma_eta.to_matrix(sample.p(), cfg.sigma_is_sd)?;
    let grid = SimexGrid::uniform(cfg.zeta_max, cfg.zeta_step, cfg.b, sigma)?;
    let summary: FitSummary = (&naive).into();
    let result = run_simex_from(&sample, family, &grid, &cfg.simex_options(), cfg.seed, naive, naive_levels)?;
    if result.n_failed > 0 {
        warnings.push(format!("{} of {} SIMEX fits did not converge", result.n_failed, grid.b * grid.zetas.len()));
    }
    let h = simex_h(&result, &sample, &grid_times)?;
    let theta_simex: Vec<f64> = result.theta_simex.to_vector().iter().copied().collect();
    let variance = if flags.no_variance {
        None
    } else {
        let tc = theta_covariance(&result, &sample, &vopts)?;
        let hv = h_covariance(&result, &sample, &tc, &grid_times, &vopts)?;
        Some(variance_block(&theta_simex, &tc.covariance, cfg.level, Some(hv.variance))?)
    };
    Ok(FitReport {
        model: family,
        n: sample.n(),
        n_events: sample.grid().n_events(),
        coordinates,
        theta_naive: summary,
        theta_simex: Some(theta_simex),
        trace: Some(trace_of(&result)),
        h: HBlock { times: h.times, values: h.values },
        variance,
        convergence: ConvergenceInfo {
            naive_converged: true,
            simex_failed: result.n_failed,
            simex_total: grid.b * grid.zetas.len(),
            warnings,
        },
    })
}
