//! Data-generating process for left-truncated cure-mixture samples with
//! additive covariate measurement error.

use nalgebra::{DMatrix, Matrix2};
use rand::Rng;
use rand_distr::{Distribution, Exp1, Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{LatentRecord, Sample, Subject};
use crate::error::{Error, Result};
use crate::link::{logistic, Family};
use crate::params::ParameterVector;
use crate::rng::{stream, Domain};
use crate::simex::CovarianceSpec;

/// Which subjects the censoring-rate target refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CensoringBasis {
    /// Share of `delta = 0` among recruited uncured subjects.
    #[default]
    Susceptible,
    /// Share of `delta = 0` among all recruited subjects, cured included.
    Overall,
}

pub const PROPOSAL_LIMIT: usize = 1_000_000;
pub const CALIBRATION_SUBJECTS: usize = 100_000;
pub const C_RANGE: (f64, f64) = (1e-3, 1e3);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default = "default_theta0")]
    pub theta0: ParameterVector,
    /// Covariance of `(X*, Z*)`.
    #[serde(default = "default_cov_sigma")]
    pub cov_sigma: [[f64; 2]; 2],
    #[serde(rename = "model")]
    pub family: Family,
    #[serde(default)]
    pub sigma_eta: CovarianceSpec,
    /// Read a scalar `sigma_eta` as a standard deviation instead of a variance.
    #[serde(default)]
    pub sigma_is_sd: bool,
    pub censoring_rate_target: f64,
    #[serde(default)]
    pub censoring_basis: CensoringBasis,
    /// Upper bound `c` of the `Uniform(0, c)` censoring time. Calibrated from
    /// the target when absent.
    #[serde(default)]
    pub censoring_c: Option<f64>,
    pub n: usize,
    #[serde(default)]
    pub tau: Option<f64>,
    /// Mean of the exponential truncation time; 0 disables truncation.
    #[serde(default = "default_truncation_mean")]
    pub truncation_mean: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_theta0() -> ParameterVector {
    ParameterVector::new(vec![1.0], vec![1.0])
}

fn default_truncation_mean() -> f64 {
    1.0
}

fn default_cov_sigma() -> [[f64; 2]; 2] {
    [[4.0, 0.7], [0.7, 3.0]]
}

impl GeneratorConfig {
    /// Paper design with the given family, censoring target, noise variance
    /// and sample size.
    pub fn paper(family: Family, censoring_rate_target: f64, sigma_eta: f64, n: usize) -> Self {
        Self {
            theta0: default_theta0(),
            cov_sigma: default_cov_sigma(),
            family,
            sigma_eta: CovarianceSpec::Scalar(sigma_eta),
            sigma_is_sd: false,
            censoring_rate_target,
            censoring_basis: CensoringBasis::default(),
            censoring_c: None,
            n,
            tau: None,
            truncation_mean: default_truncation_mean(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.theta0.check(1, 1)?;
        let m = Matrix2::new(self.cov_sigma[0][0], self.cov_sigma[0][1], self.cov_sigma[1][0], self.cov_sigma[1][1]);
        if (m[(0, 1)] - m[(1, 0)]).abs() > 1e-12 || m.cholesky().is_none() {
            return Err(Error::Config("cov_sigma must be symmetric positive definite".into()));
        }
        if !(self.censoring_rate_target > 0.0 && self.censoring_rate_target < 1.0) {
            return Err(Error::Config(format!(
                "censoring_rate_target must lie in (0, 1), got {}",
                self.censoring_rate_target
            )));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if let Some(c) = self.censoring_c {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("censoring_c must be positive, got {c}")));
            }
        }
        if !(self.truncation_mean >= 0.0 && self.truncation_mean.is_finite()) {
            return Err(Error::Config(format!(
                "truncation_mean must be finite and nonnegative, got {}",
                self.truncation_mean
            )));
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::Config(format!("tau must be positive and finite, got {tau}")));
            }
        }
        self.noise_matrix()?;
        Ok(())
    }

    pub fn noise_matrix(&self) -> Result<DMatrix<f64>> {
        self.sigma_eta.to_matrix(1, self.sigma_is_sd)
    }
}

/// A draw from the recruited (truncation-accepted) population, before
/// censoring and measurement error.
#[derive(Debug, Clone, Copy)]
struct Recruit {
    x: f64,
    z: f64,
    pi: bool,
    tstar: f64,
    a: f64,
}

impl Recruit {
    /// `T~`: the latent time of susceptibles, `+inf` for the cured.
    fn ttilde(&self) -> f64 {
        if self.pi {
            self.tstar
        } else {
            f64::INFINITY
        }
    }

    fn censored_under(&self, c_uniform: f64, c: f64) -> bool {
        self.ttilde() > self.a + c * c_uniform
    }
}

struct Design {
    chol: [f64; 3],
    beta: f64,
    gamma: f64,
    family: Family,
    truncation_mean: f64,
}

impl Design {
    fn new(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.cov_sigma;
        let l11 = s[0][0].sqrt();
        let l21 = s[1][0] / l11;
        let l22 = (s[1][1] - l21 * l21).sqrt();
        Ok(Self {
            chol: [l11, l21, l22],
            beta: cfg.theta0.beta[0],
            gamma: cfg.theta0.gamma[0],
            family: cfg.family,
            truncation_mean: cfg.truncation_mean,
        })
    }

    fn propose<R: Rng + ?Sized>(&self, rng: &mut R) -> Recruit {
        let n1: f64 = StandardNormal.sample(rng);
        let n2: f64 = StandardNormal.sample(rng);
        let x = self.chol[0] * n1;
        let z = self.chol[1] * n1 + self.chol[2] * n2;
        let u: f64 = rng.random();
        let pi = u < logistic(z * self.gamma);
        let eps = match self.family {
            Family::Ph => {
                let e: f64 = Exp1.sample(rng);
                e.ln()
            }
            Family::Po => {
                let u: f64 = Open01.sample(rng);
                (u / (1.0 - u)).ln()
            }
        };
        let tstar = (-x * self.beta + eps).exp();
        let e: f64 = Exp1.sample(rng);
        let a = self.truncation_mean * e;
        Recruit { x, z, pi, tstar, a }
    }

    fn recruit<R: Rng + ?Sized>(&self, rng: &mut R, budget: &mut usize) -> Option<Recruit> {
        while *budget > 0 {
            *budget -= 1;
            let r = self.propose(rng);
            if r.ttilde() >= r.a {
                return Some(r);
            }
        }
        None
    }
}

/// One proposal from the full population, before the truncation filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationDraw {
    pub x: f64,
    pub z: f64,
    pub pi: bool,
    pub tstar: f64,
    pub a: f64,
    /// Whether the subject would be recruited (`T~ >= A*`).
    pub accepted: bool,
}

/// `n` raw proposals, accepted or not.
pub fn propose_population<R: Rng + ?Sized>(cfg: &GeneratorConfig, n: usize, rng: &mut R) -> Result<Vec<PopulationDraw>> {
    let design = Design::new(cfg)?;
    Ok((0..n)
        .map(|_| {
            let r = design.propose(rng);
            PopulationDraw { x: r.x, z: r.z, pi: r.pi, tstar: r.tstar, a: r.a, accepted: r.ttilde() >= r.a }
        })
        .collect())
}

/// Draws one sample of `cfg.n` recruited subjects. `c` is the censoring
/// bound; see [`resolve_censoring`].
pub fn generate_with_c<R: Rng + ?Sized>(
    cfg: &GeneratorConfig,
    c: f64,
    rng: &mut R,
) -> Result<(Sample, Vec<LatentRecord>)> {
    let design = Design::new(cfg)?;
    let noise_sd = cfg.noise_matrix()?[(0, 0)].max(0.0).sqrt();
    let mut budget = PROPOSAL_LIMIT;
    let mut subjects = Vec::with_capacity(cfg.n);
    let mut latent = Vec::with_capacity(cfg.n);
    while subjects.len() < cfg.n {
        let Some(r) = design.recruit(rng, &mut budget) else {
            return Err(Error::DegenerateTruncation {
                accepted: subjects.len(),
                requested: cfg.n,
                proposals: PROPOSAL_LIMIT,
            });
        };
        let cu: f64 = rng.random();
        let eta: f64 = StandardNormal.sample(rng);
        let end = r.a + c * cu;
        let tt = r.ttilde();
        let (mut y, mut delta) = if tt <= end { (tt, true) } else { (end, false) };
        if let Some(tau) = cfg.tau {
            if r.a > tau {
                continue;
            }
            if y > tau {
                y = tau;
                delta = false;
            }
        }
        subjects.push(Subject::new(y, r.a, delta, vec![r.x + noise_sd * eta], vec![r.z]));
        latent.push(LatentRecord { x: r.x, pi: r.pi, tstar: r.tstar });
    }
    Ok((Sample::new(subjects)?, latent))
}

/// Draws one sample, calibrating the censoring bound first when the config
/// does not fix it.
pub fn generate_sample<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<(Sample, Vec<LatentRecord>)> {
    let c = resolve_censoring(cfg)?;
    generate_with_c(cfg, c, rng)
}

pub fn resolve_censoring(cfg: &GeneratorConfig) -> Result<f64> {
    match cfg.censoring_c {
        Some(c) => Ok(c),
        None => calibrate_censoring(cfg, cfg.censoring_rate_target, cfg.seed),
    }
}

/// Recruited subjects and censoring uniforms shared by every candidate `c`.
pub struct CalibrationPool {
    recruits: Vec<Recruit>,
    uniforms: Vec<f64>,
    basis: CensoringBasis,
}

impl CalibrationPool {
    pub fn new(cfg: &GeneratorConfig, size: usize, seed: u64) -> Result<Self> {
        let design = Design::new(cfg)?;
        let mut rng = stream(seed, Domain::Calibrate, &[cfg.family as u64]);
        let mut recruits = Vec::with_capacity(size);
        let mut uniforms = Vec::with_capacity(size);
        let mut budget = PROPOSAL_LIMIT.max(20 * size);
        while recruits.len() < size {
            let Some(r) = design.recruit(&mut rng, &mut budget) else {
                return Err(Error::DegenerateTruncation {
                    accepted: recruits.len(),
                    requested: size,
                    proposals: PROPOSAL_LIMIT.max(20 * size),
                });
            };
            recruits.push(r);
            uniforms.push(rng.random());
        }
        Ok(Self { recruits, uniforms, basis: cfg.censoring_basis })
    }

    /// Censoring proportion at bound `c` under the configured basis.
    pub fn rate(&self, c: f64) -> f64 {
        let mut num = 0usize;
        let mut den = 0usize;
        for (r, &u) in self.recruits.iter().zip(&self.uniforms) {
            if self.basis == CensoringBasis::Susceptible && !r.pi {
                continue;
            }
            den += 1;
            if r.censored_under(u, c) {
                num += 1;
            }
        }
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    }

    /// Fraction of recruits that are cured.
    pub fn cured_fraction(&self) -> f64 {
        self.recruits.iter().filter(|r| !r.pi).count() as f64 / self.recruits.len() as f64
    }
}

/// Finds `c` whose censoring proportion matches `target` by bisection on
/// `log c` over `[1e-3, 1e3]`, using a fixed pool of simulated recruits.
pub fn calibrate_censoring(cfg: &GeneratorConfig, target: f64, seed: u64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Config(format!("censoring target must lie in (0, 1), got {target}")));
    }
    let pool = CalibrationPool::new(cfg, CALIBRATION_SUBJECTS, seed)?;
    calibrate_on(&pool, target)
}

pub fn calibrate_on(pool: &CalibrationPool, target: f64) -> Result<f64> {
    let (lo_c, hi_c) = C_RANGE;
    let ceiling = pool.rate(lo_c);
    let floor = pool.rate(hi_c);
    if target < floor || target > ceiling {
        return Err(Error::CensoringInfeasible { target, floor, ceiling });
    }
    let (mut lo, mut hi) = (lo_c.ln(), hi_c.ln());
    let mut best = (f64::INFINITY, hi_c);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let c = mid.exp();
        let r = pool.rate(c);
        if (r - target).abs() < best.0 {
            best = ((r - target).abs(), c);
        }
        if (r - target).abs() <= 1e-4 || hi - lo < 1e-12 {
            break;
        }
        // the rate decreases in c
        if r > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.1)
}
