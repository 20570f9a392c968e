//! Monte Carlo study reproducing the layout of the simulation table.

use std::fmt;

use log::{info, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::coordinate_names;
use crate::data::{LatentRecord, Sample};
use crate::error::{Error, Result};
use crate::estimate::{FitResult, Problem, SolverOptions};
use crate::link::Family;
use crate::params::ParameterVector;
use crate::rng::{derive_key, stream, Domain};
use crate::sim::generate::{generate_with_c, resolve_censoring, CensoringBasis, GeneratorConfig};
use crate::simex::{run_simex_from, CovarianceSpec, Extrapolant, NoiseSharing, SimexGrid, SimexOptions};
use crate::variance::{naive_sandwich, theta_covariance, wald_interval, VarianceOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Simex,
    Naive,
    /// The same equations on the true covariates `X`.
    #[serde(alias = "oracle-x")]
    Oracle,
}

impl Estimator {
    pub fn token(self) -> &'static str {
        match self {
            Estimator::Simex => "simex",
            Estimator::Naive => "naive",
            Estimator::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// One design point of the study grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyCell {
    pub model: Family,
    pub cr: f64,
    pub sigma_eta: f64,
}

impl StudyCell {
    /// Stable key for file names and random streams.
    pub fn key(&self) -> String {
        format!("{}_cr{}_s{}", self.model, self.cr, self.sigma_eta)
    }

    fn stream_indices(&self) -> [u64; 3] {
        [self.model as u64, self.cr.to_bits(), self.sigma_eta.to_bits()]
    }
}

fn default_reps() -> usize {
    200
}
fn default_b() -> usize {
    50
}
fn default_n() -> usize {
    200
}
fn default_zeta_max() -> f64 {
    2.0
}
fn default_zeta_step() -> f64 {
    0.25
}
fn default_estimators() -> Vec<Estimator> {
    vec![Estimator::Simex, Estimator::Naive]
}
fn default_level() -> f64 {
    0.95
}
fn default_invalid_fraction() -> f64 {
    0.1
}
fn default_theta0() -> ParameterVector {
    ParameterVector::new(vec![1.0], vec![1.0])
}
fn default_cov_sigma() -> [[f64; 2]; 2] {
    [[4.0, 0.7], [0.7, 3.0]]
}
fn default_truncation_mean() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub cells: Vec<StudyCell>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_b", rename = "B")]
    pub b: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_zeta_max")]
    pub zeta_max: f64,
    #[serde(default = "default_zeta_step")]
    pub zeta_step: f64,
    #[serde(default)]
    pub extrapolant: Extrapolant,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_theta0")]
    pub theta0: ParameterVector,
    #[serde(default = "default_cov_sigma")]
    pub cov_sigma: [[f64; 2]; 2],
    #[serde(default)]
    pub sigma_is_sd: bool,
    #[serde(default)]
    pub censoring_basis: CensoringBasis,
    #[serde(default = "default_truncation_mean")]
    pub truncation_mean: f64,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub noise_sharing: NoiseSharing,
    #[serde(default)]
    pub variance: VarianceOptions,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Cells with a larger share of failed replicates are flagged invalid.
    #[serde(default = "default_invalid_fraction")]
    pub invalid_fraction: f64,
}

impl StudyConfig {
    /// Desk-scale study over the given cells.
    pub fn desk(cells: Vec<StudyCell>) -> Self {
        Self {
            cells,
            reps: default_reps(),
            b: default_b(),
            n: default_n(),
            zeta_max: default_zeta_max(),
            zeta_step: default_zeta_step(),
            extrapolant: Extrapolant::default(),
            estimators: default_estimators(),
            seed: 0,
            theta0: default_theta0(),
            cov_sigma: default_cov_sigma(),
            sigma_is_sd: false,
            censoring_basis: CensoringBasis::default(),
            truncation_mean: default_truncation_mean(),
            tau: None,
            solver: SolverOptions::default(),
            noise_sharing: NoiseSharing::default(),
            variance: VarianceOptions::default(),
            level: default_level(),
            invalid_fraction: default_invalid_fraction(),
        }
    }

    /// The twelve cells of the simulation table.
    pub fn paper_cells() -> Vec<StudyCell> {
        let mut cells = Vec::new();
        for model in [Family::Ph, Family::Po] {
            for cr in [0.25, 0.5] {
                for sigma_eta in [0.01, 0.5, 0.75] {
                    cells.push(StudyCell { model, cr, sigma_eta });
                }
            }
        }
        cells
    }

    /// Paper protocol: 1000 replicates and `B = 500`.
    pub fn full_scale(mut self) -> Self {
        self.reps = 1000;
        self.b = 500;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("study has no cells".into()));
        }
        if self.reps == 0 || self.b == 0 {
            return Err(Error::Config("reps and B must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("study needs at least one estimator".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("level must lie in (0, 1), got {}", self.level)));
        }
        for cell in &self.cells {
            self.generator(cell).validate()?;
        }
        SimexGrid::uniform(self.zeta_max, self.zeta_step, self.b, DMatrix::zeros(1, 1))?;
        Ok(())
    }

    pub fn generator(&self, cell: &StudyCell) -> GeneratorConfig {
        GeneratorConfig {
            theta0: self.theta0.clone(),
            cov_sigma: self.cov_sigma,
            family: cell.model,
            sigma_eta: CovarianceSpec::Scalar(cell.sigma_eta),
            sigma_is_sd: self.sigma_is_sd,
            censoring_rate_target: cell.cr,
            censoring_basis: self.censoring_basis,
            censoring_c: None,
            n: self.n,
            tau: self.tau,
            truncation_mean: self.truncation_mean,
            seed: derive_key(self.seed, Domain::Calibrate, &cell.stream_indices()),
        }
    }

    fn simex_options(&self) -> SimexOptions {
        SimexOptions {
            extrapolant: self.extrapolant,
            solver: self.solver,
            noise_sharing: self.noise_sharing,
            ..SimexOptions::default()
        }
    }
}

/// One estimator on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub rep: usize,
    pub method: Estimator,
    pub theta: Option<Vec<f64>>,
    /// Diagonal of the model-based covariance, when available.
    pub variance: Option<Vec<f64>>,
    pub covered: Option<Vec<bool>>,
    pub error: Option<String>,
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: Family,
    pub cr: f64,
    pub sigma_eta: f64,
    pub method: Estimator,
    pub coordinate: String,
    pub bias: f64,
    pub var: f64,
    pub mse: f64,
    pub cp: f64,
    /// Mean model-based variance.
    pub mve: f64,
    pub n_ok: usize,
    pub n_fail: usize,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: StudyCell,
    pub censoring_c: f64,
    pub rows: Vec<MetricsRow>,
    pub outcomes: Vec<ReplicateOutcome>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct McMetrics {
    pub rows: Vec<MetricsRow>,
}

impl McMetrics {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for row in &self.rows {
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let expected = METRICS_COLUMNS;
        if !headers.is_empty() && headers.iter().ne(expected.iter().copied()) {
            let have: Vec<&str> = headers.iter().collect();
            let missing: Vec<&str> = expected.iter().copied().filter(|c| !have.contains(c)).collect();
            let extra: Vec<&str> = have.iter().copied().filter(|c| !expected.contains(c)).collect();
            return Err(Error::Schema(format!(
                "metrics columns differ: missing [{}], unexpected [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
        Ok(Self { rows })
    }
}

pub const METRICS_COLUMNS: [&str; 13] = [
    "model", "cr", "sigma_eta", "method", "coordinate", "bias", "var", "mse", "cp", "mve", "n_ok", "n_fail", "valid",
];

struct Estimate {
    theta: Vec<f64>,
    covariance: Option<DMatrix<f64>>,
}

fn outcome(rep: usize, method: Estimator, est: Result<Estimate>, truth: &[f64], level: f64) -> ReplicateOutcome {
    match est {
        Ok(e) => {
            let interval = e.covariance.as_ref().and_then(|c| wald_interval(&e.theta, c, level).ok());
            let variance = e.covariance.as_ref().map(|c| c.diagonal().iter().copied().collect());
            let covered = interval.map(|iv| iv.iter().zip(truth).map(|(&(lo, hi), &t)| lo <= t && t <= hi).collect());
            ReplicateOutcome { rep, method, theta: Some(e.theta), variance, covered, error: None }
        }
        Err(err) => ReplicateOutcome { rep, method, theta: None, variance: None, covered: None, error: Some(err.to_string()) },
    }
}

fn converged(fit: &FitResult) -> Result<()> {
    if fit.converged {
        Ok(())
    } else {
        Err(Error::Numeric(format!("solver did not converge (|U| = {:.3e})", fit.score_norm)))
    }
}

fn with_variance(theta: Vec<f64>, cov: Result<DMatrix<f64>>) -> Result<Estimate> {
    let covariance = match cov {
        Ok(c) => Some(c),
        Err(e) => {
            warn!("variance unavailable: {e}");
            None
        }
    };
    Ok(Estimate { theta, covariance })
}

fn plain_fit(cfg: &StudyConfig, sample: &Sample, latency: &DMatrix<f64>, family: Family) -> Result<(FitResult, Vec<f64>)> {
    let problem = Problem::new(sample, latency, family, cfg.solver.score)?;
    problem.solve(&ParameterVector::zeros(sample.p(), sample.q()), &cfg.solver)
}

fn sandwich_estimate(
    cfg: &StudyConfig,
    sample: &Sample,
    latency: &DMatrix<f64>,
    family: Family,
    fit: &FitResult,
) -> Result<Estimate> {
    converged(fit)?;
    let cov = naive_sandwich(sample, latency, &fit.theta_hat, &fit.h_hat, family, &cfg.solver.score, &cfg.variance);
    with_variance(fit.theta_hat.to_vector().iter().copied().collect(), cov)
}

fn replicate(
    cfg: &StudyConfig,
    cell: &StudyCell,
    gen: &GeneratorConfig,
    c: f64,
    rep: usize,
) -> Result<Vec<ReplicateOutcome>> {
    let idx = cell.stream_indices();
    let mut rng = stream(cfg.seed, Domain::Generate, &[idx[0], idx[1], idx[2], rep as u64]);
    let (sample, latent) = generate_with_c(gen, c, &mut rng)?;
    let truth: Vec<f64> = cfg.theta0.to_vector().iter().copied().collect();
    let family = cell.model;
    let w = sample.w_matrix();
    let naive = plain_fit(cfg, &sample, &w, family);
    let mut out = Vec::new();
    for &method in &cfg.estimators {
        let est = match method {
            Estimator::Naive => naive
                .as_ref()
                .map_err(clone_err)
                .and_then(|(fit, _)| sandwich_estimate(cfg, &sample, &w, family, fit)),
            Estimator::Oracle => {
                let x = latent_matrix(&latent);
                plain_fit(cfg, &sample, &x, family).and_then(|(fit, _)| sandwich_estimate(cfg, &sample, &x, family, &fit))
            }
            Estimator::Simex => naive.as_ref().map_err(clone_err).and_then(|(fit, levels)| {
                let sigma = CovarianceSpec::Scalar(cell.sigma_eta).to_matrix(sample.p(), cfg.sigma_is_sd)?;
                let grid = SimexGrid::uniform(cfg.zeta_max, cfg.zeta_step, cfg.b, sigma)?;
                let seed = derive_key(cfg.seed, Domain::Replicate, &[idx[0], idx[1], idx[2], rep as u64]);
                let result =
                    run_simex_from(&sample, family, &grid, &cfg.simex_options(), seed, fit.clone(), levels.clone())?;
                let cov = theta_covariance(&result, &sample, &cfg.variance).map(|v| v.covariance);
                with_variance(result.theta_simex.to_vector().iter().copied().collect(), cov)
            }),
        };
        out.push(outcome(rep, method, est, &truth, cfg.level));
    }
    Ok(out)
}

fn clone_err(e: &Error) -> Error {
    match e {
        Error::Numeric(s) => Error::Numeric(s.clone()),
        other => Error::Numeric(other.to_string()),
    }
}

fn latent_matrix(latent: &[LatentRecord]) -> DMatrix<f64> {
    DMatrix::from_fn(latent.len(), 1, |i, _| latent[i].x)
}

/// Summary rows for one method over its replicate outcomes.
pub fn summarize(
    cell: &StudyCell,
    method: Estimator,
    outcomes: &[ReplicateOutcome],
    truth: &[f64],
    names: &[String],
    invalid_fraction: f64,
) -> Vec<MetricsRow> {
    let mine: Vec<&ReplicateOutcome> = outcomes.iter().filter(|o| o.method == method).collect();
    let ok: Vec<&Vec<f64>> = mine.iter().filter_map(|o| o.theta.as_ref()).collect();
    let n_ok = ok.len();
    let n_fail = mine.len() - n_ok;
    let valid = n_ok > 0 && (n_fail as f64) <= invalid_fraction * mine.len() as f64;
    truth
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let vals: Vec<f64> = ok.iter().map(|v| v[k]).collect();
            let r = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / r;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)
            } else {
                f64::NAN
            };
            let mse = vals.iter().map(|v| (v - t).powi(2)).sum::<f64>() / r;
            let cov: Vec<bool> = mine.iter().filter_map(|o| o.covered.as_ref().map(|c| c[k])).collect();
            let cp = if cov.is_empty() { f64::NAN } else { cov.iter().filter(|&&c| c).count() as f64 / cov.len() as f64 };
            let mv: Vec<f64> = mine.iter().filter_map(|o| o.variance.as_ref().map(|v| v[k])).collect();
            let mve = if mv.is_empty() { f64::NAN } else { mv.iter().sum::<f64>() / mv.len() as f64 };
            MetricsRow {
                model: cell.model,
                cr: cell.cr,
                sigma_eta: cell.sigma_eta,
                method,
                coordinate: names[k].clone(),
                bias: mean - t,
                var,
                mse,
                cp,
                mve,
                n_ok,
                n_fail,
                valid,
            }
        })
        .collect()
}

/// Runs every replicate of one cell.
pub fn run_cell(cfg: &StudyConfig, cell: &StudyCell) -> Result<CellResult> {
    let gen = cfg.generator(cell);
    let c = resolve_censoring(&gen)?;
    info!("cell {}: censoring bound c = {c:.4}", cell.key());
    let per_rep: Vec<Result<Vec<ReplicateOutcome>>> =
        (0..cfg.reps).into_par_iter().map(|rep| replicate(cfg, cell, &gen, c, rep)).collect();
    let mut outcomes = Vec::with_capacity(cfg.reps * cfg.estimators.len());
    for (rep, r) in per_rep.into_iter().enumerate() {
        match r {
            Ok(o) => outcomes.extend(o),
            Err(e) => {
                for &method in &cfg.estimators {
                    outcomes.push(ReplicateOutcome {
                        rep,
                        method,
                        theta: None,
                        variance: None,
                        covered: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
    }
    let truth: Vec<f64> = cfg.theta0.to_vector().iter().copied().collect();
    let names = coordinate_names(cfg.theta0.beta.len(), cfg.theta0.gamma.len());
    let mut rows = Vec::new();
    for &method in &cfg.estimators {
        let r = summarize(cell, method, &outcomes, &truth, &names, cfg.invalid_fraction);
        if r.first().is_some_and(|row| !row.valid) {
            warn!("cell {} flagged invalid for {method}: {} of {} replicates failed", cell.key(), r[0].n_fail, cfg.reps);
        }
        rows.extend(r);
    }
    Ok(CellResult { cell: *cell, censoring_c: c, rows, outcomes })
}

/// Runs the whole grid; cells run one after another, replicates in parallel.
pub fn run_mc(cfg: &StudyConfig) -> Result<McMetrics> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for cell in &cfg.cells {
        rows.extend(run_cell(cfg, cell)?.rows);
    }
    Ok(McMetrics { rows })
}
