//! Simulation-extrapolation: perturb the error-prone covariates at
//! increasing noise levels, re-estimate, and extrapolate the trend back to
//! `zeta = -1`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::estimate::{FitResult, Problem, SolverOptions};
use crate::link::Family;
use crate::params::ParameterVector;
use crate::rng::{stream, Domain};
use crate::step::StepFunction;

/// Measurement-error covariance as given in a config: a scalar `s` stands
/// for `s * I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovarianceSpec {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl Default for CovarianceSpec {
    fn default() -> Self {
        CovarianceSpec::Scalar(0.0)
    }
}

impl CovarianceSpec {
    /// `p x p` covariance. With `is_sd`, a scalar is read as a standard
    /// deviation; matrices are always covariances.
    pub fn to_matrix(&self, p: usize, is_sd: bool) -> Result<DMatrix<f64>> {
        let m = match self {
            CovarianceSpec::Scalar(s) => {
                if !s.is_finite() || *s < 0.0 {
                    return Err(Error::Config(format!("sigma_eta must be finite and nonnegative, got {s}")));
                }
                let v = if is_sd { s * s } else { *s };
                DMatrix::identity(p, p) * v
            }
            CovarianceSpec::Matrix(rows) => {
                if rows.len() != p || rows.iter().any(|r| r.len() != p) {
                    return Err(Error::Config(format!("sigma_eta must be {p}x{p}")));
                }
                DMatrix::from_fn(p, p, |i, j| rows[i][j])
            }
        };
        noise_root(&m)?;
        Ok(m)
    }
}

/// A square root `L` with `L L' = sigma`, for symmetric PSD `sigma`.
pub fn noise_root(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = sigma.nrows();
    if sigma.ncols() != p || sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("sigma_eta must be a finite square matrix".into()));
    }
    let scale = sigma.amax().max(1.0);
    if (sigma - sigma.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Config("sigma_eta must be symmetric".into()));
    }
    let eig = sigma.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::Config("sigma_eta must be positive semidefinite".into()));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimexGrid {
    pub zetas: Vec<f64>,
    pub b: usize,
    pub sigma_eta: DMatrix<f64>,
}

impl SimexGrid {
    pub fn new(zetas: Vec<f64>, b: usize, sigma_eta: DMatrix<f64>) -> Result<Self> {
        if zetas.first() != Some(&0.0) {
            return Err(Error::Config("zeta grid must start at 0".into()));
        }
        if zetas.windows(2).any(|w| !(w[1] > w[0])) || zetas.iter().any(|z| !z.is_finite()) {
            return Err(Error::Config("zeta grid must be finite and strictly increasing".into()));
        }
        if b == 0 {
            return Err(Error::Config("B must be at least 1".into()));
        }
        noise_root(&sigma_eta)?;
        Ok(Self { zetas, b, sigma_eta })
    }

    /// `{0, step, 2 step, ..., zeta_max}`.
    pub fn uniform(zeta_max: f64, zeta_step: f64, b: usize, sigma_eta: DMatrix<f64>) -> Result<Self> {
        if !(zeta_step > 0.0) || !(zeta_max > 0.0) {
            return Err(Error::Config("zeta_max and zeta_step must be positive".into()));
        }
        let count = (zeta_max / zeta_step + 1e-9).floor() as usize;
        let zetas = (0..=count).map(|m| m as f64 * zeta_step).collect();
        Self::new(zetas, b, sigma_eta)
    }

    pub fn p(&self) -> usize {
        self.sigma_eta.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extrapolant {
    #[default]
    Quadratic,
    Linear,
}

impl Extrapolant {
    pub fn degree(self) -> usize {
        match self {
            Extrapolant::Quadratic => 2,
            Extrapolant::Linear => 1,
        }
    }

    /// `d phi / d Gamma` at `zeta`: the monomials `(1, zeta, ...)`.
    pub fn basis(self, zeta: f64) -> Vec<f64> {
        (0..=self.degree()).map(|k| zeta.powi(k as i32)).collect()
    }
}

/// Per-coordinate polynomial fits of the estimates against `zeta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationModel {
    pub extrapolant: Extrapolant,
    /// `coefficients[j]` holds `(Gamma_0, Gamma_1, ...)` for coordinate `j`.
    pub coefficients: Vec<Vec<f64>>,
    /// Residual sum of squares per coordinate.
    pub residuals: Vec<f64>,
}

fn design(zetas: &[f64], kind: Extrapolant) -> DMatrix<f64> {
    let cols = kind.degree() + 1;
    DMatrix::from_fn(zetas.len(), cols, |i, k| zetas[i].powi(k as i32))
}

/// `(C'C)^{-1} C'` for the polynomial design on `zetas`.
fn projector(zetas: &[f64], kind: Extrapolant) -> Result<DMatrix<f64>> {
    let cols = kind.degree() + 1;
    let mut distinct = zetas.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < cols {
        return Err(Error::Extrapolation(format!(
            "{} distinct zeta values cannot identify a degree-{} extrapolant",
            distinct.len(),
            kind.degree()
        )));
    }
    let c = design(zetas, kind);
    let qr = c.clone().qr();
    let r = qr.r();
    let rmax = r.diagonal().amax();
    if r.diagonal().iter().any(|v| v.abs() <= 1e-12 * rmax) {
        return Err(Error::Extrapolation("collinear extrapolation design".into()));
    }
    let rinv = r
        .try_inverse()
        .ok_or_else(|| Error::Extrapolation("singular extrapolation design".into()))?;
    Ok(&rinv * qr.q().transpose())
}

/// Least-squares fit of `values[m]` (one vector per `zetas[m]`).
pub fn fit_extrapolant(points: &[(f64, Vec<f64>)], kind: Extrapolant) -> Result<ExtrapolationModel> {
    let zetas: Vec<f64> = points.iter().map(|p| p.0).collect();
    let dim = points.first().map_or(0, |p| p.1.len());
    if points.iter().any(|p| p.1.len() != dim) {
        return Err(Error::Domain("extrapolation points have inconsistent dimensions".into()));
    }
    let proj = projector(&zetas, kind)?;
    let c = design(&zetas, kind);
    let mut coefficients = Vec::with_capacity(dim);
    let mut residuals = Vec::with_capacity(dim);
    for j in 0..dim {
        let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.1[j]));
        let gamma = &proj * &y;
        residuals.push((&c * &gamma - &y).norm_squared());
        coefficients.push(gamma.iter().copied().collect());
    }
    Ok(ExtrapolationModel { extrapolant: kind, coefficients, residuals })
}

/// `phi(zeta, Gamma)` per coordinate.
pub fn extrapolate_at(model: &ExtrapolationModel, zeta: f64) -> Vec<f64> {
    let basis = model.extrapolant.basis(zeta);
    model
        .coefficients
        .iter()
        .map(|g| g.iter().zip(&basis).map(|(a, b)| a * b).sum())
        .collect()
}

/// Weights `omega` with `phi(at, Gamma_hat) = sum_m omega_m value_m`.
pub fn extrapolation_weights(zetas: &[f64], kind: Extrapolant, at: f64) -> Result<DVector<f64>> {
    let proj = projector(zetas, kind)?;
    let g = DVector::from_vec(kind.basis(at));
    Ok(proj.transpose() * g)
}

/// `n x p` matrix of i.i.d. `N(0, L L')` rows.
pub fn noise_draw<R: Rng + ?Sized>(n: usize, root: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
    let p = root.nrows();
    let e = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    e * root.transpose()
}

/// `W + sqrt(zeta) E` with rows of `E` drawn from `N(0, sigma_eta)`.
pub fn perturb_covariates<R: Rng + ?Sized>(
    w: &DMatrix<f64>,
    zeta: f64,
    sigma_eta: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if !(zeta >= 0.0) {
        return Err(Error::Domain(format!("zeta must be nonnegative, got {zeta}")));
    }
    if sigma_eta.nrows() != w.ncols() {
        return Err(Error::Domain("sigma_eta dimension does not match covariates".into()));
    }
    let root = noise_root(sigma_eta)?;
    Ok(w + noise_draw(w.nrows(), &root, rng) * zeta.sqrt())
}

/// Coordinate-wise mean.
pub fn average_over_b(fits: &[ParameterVector]) -> Result<ParameterVector> {
    let first = fits.first().ok_or_else(|| Error::Domain("cannot average an empty set of fits".into()))?;
    let (p, q) = (first.p(), first.q());
    let mut sum = DVector::zeros(p + q);
    for f in fits {
        if f.p() != p || f.q() != q {
            return Err(Error::Domain("fits have inconsistent dimensions".into()));
        }
        sum += f.to_vector();
    }
    sum /= fits.len() as f64;
    Ok(ParameterVector::from_stacked(sum.as_slice(), p))
}

/// How the pseudo-errors at different `zeta` relate for a given `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSharing {
    /// One draw `E_b` per `b`, scaled by `sqrt(zeta)` at every level.
    #[default]
    Shared,
    /// An independent draw for every `(b, zeta)`.
    PerZeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimexOptions {
    pub extrapolant: Extrapolant,
    pub solver: SolverOptions,
    pub noise_sharing: NoiseSharing,
    /// Largest tolerated share of failed `(b, zeta)` fits.
    pub max_fail_fraction: f64,
}

impl Default for SimexOptions {
    fn default() -> Self {
        Self {
            extrapolant: Extrapolant::Quadratic,
            solver: SolverOptions::default(),
            noise_sharing: NoiseSharing::Shared,
            max_fail_fraction: 0.2,
        }
    }
}

/// One `(b, zeta)` estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub theta: ParameterVector,
    pub converged: bool,
    pub score_norm: f64,
    pub iterations: usize,
    #[serde(skip)]
    pub levels: Vec<f64>,
}

impl FitRecord {
    fn failed(theta: ParameterVector) -> Self {
        Self { theta, converged: false, score_norm: f64::NAN, iterations: 0, levels: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimexResult {
    pub family: Family,
    pub zetas: Vec<f64>,
    pub b: usize,
    pub seed: u64,
    pub options: SimexOptions,
    #[serde(skip)]
    pub(crate) noise_root: DMatrix<f64>,
    pub naive: FitResult,
    /// `fits[m][b]` is the estimate at `zetas[m]` with pseudo-errors `b`.
    pub fits: Vec<Vec<FitRecord>>,
    /// Converged-fit averages; `None` where every fit at that level failed.
    pub theta_by_zeta: Vec<Option<ParameterVector>>,
    pub model: ExtrapolationModel,
    pub theta_simex: ParameterVector,
    pub n_failed: usize,
}

impl SimexResult {
    /// Levels of the grid that entered the extrapolation.
    pub fn active_zetas(&self) -> Vec<usize> {
        (0..self.zetas.len()).filter(|&m| self.theta_by_zeta[m].is_some()).collect()
    }

    /// `W(b, zeta_m)`, regenerated from the stored seed.
    pub fn perturbed_latency(&self, w: &DMatrix<f64>, b: usize, m: usize) -> DMatrix<f64> {
        perturbed(w, &self.noise_root, self.zetas[m], self.seed, self.options.noise_sharing, b, m)
    }

    /// Extrapolation weights over the active levels, aligned with
    /// [`SimexResult::active_zetas`].
    pub fn weights(&self) -> Result<DVector<f64>> {
        let z: Vec<f64> = self.active_zetas().iter().map(|&m| self.zetas[m]).collect();
        extrapolation_weights(&z, self.options.extrapolant, -1.0)
    }
}

fn perturbed(
    w: &DMatrix<f64>,
    root: &DMatrix<f64>,
    zeta: f64,
    seed: u64,
    sharing: NoiseSharing,
    b: usize,
    m: usize,
) -> DMatrix<f64> {
    if zeta == 0.0 {
        return w.clone();
    }
    let mut rng = match sharing {
        NoiseSharing::Shared => stream(seed, Domain::Perturb, &[b as u64]),
        NoiseSharing::PerZeta => stream(seed, Domain::Perturb, &[b as u64, m as u64]),
    };
    w + noise_draw(w.nrows(), root, &mut rng) * zeta.sqrt()
}

/// Stages 1 to 3: perturb, estimate at every `(b, zeta)`, average over `b`
/// and extrapolate to `zeta = -1`.
pub fn run_simex(
    sample: &Sample,
    family: Family,
    grid: &SimexGrid,
    opts: &SimexOptions,
    seed: u64,
) -> Result<SimexResult> {
    let w = sample.w_matrix();
    let naive_problem = Problem::new(sample, &w, family, opts.solver.score)?;
    let init = ParameterVector::zeros(sample.p(), sample.q());
    let (naive, naive_levels) = naive_problem.solve(&init, &opts.solver)?;
    run_simex_from(sample, family, grid, opts, seed, naive, naive_levels)
}

pub(crate) fn run_simex_from(
    sample: &Sample,
    family: Family,
    grid: &SimexGrid,
    opts: &SimexOptions,
    seed: u64,
    naive: FitResult,
    naive_levels: Vec<f64>,
) -> Result<SimexResult> {
    if grid.p() != sample.p() {
        return Err(Error::Config(format!(
            "sigma_eta is {}x{} but the sample has p = {}",
            grid.p(),
            grid.p(),
            sample.p()
        )));
    }
    let root = noise_root(&grid.sigma_eta)?;
    let w = sample.w_matrix();
    let m_total = grid.zetas.len();
    let base = FitRecord {
        theta: naive.theta_hat.clone(),
        converged: naive.converged,
        score_norm: naive.score_norm,
        iterations: naive.iterations,
        levels: naive_levels,
    };

    // pseudo-data fits are warm-started and may be dropped, so they skip the
    // restart search
    let inner = SolverOptions { restarts: 0, ..opts.solver };
    // one task per b walks the zeta grid, warm-starting from the previous level
    let by_b: Vec<Vec<FitRecord>> = (0..grid.b)
        .into_par_iter()
        .map(|b| {
            let mut chain = Vec::with_capacity(m_total);
            chain.push(base.clone());
            let mut last = base.clone();
            for m in 1..m_total {
                let lat = perturbed(&w, &root, grid.zetas[m], seed, opts.noise_sharing, b, m);
                let rec = Problem::new(sample, &lat, family, opts.solver.score)
                    .and_then(|p| {
                        let warm = (!last.levels.is_empty()).then_some(&last.levels[..]);
                        p.solve_warm(&last.theta, warm, &inner)
                    })
                    .map(|(fit, levels)| FitRecord {
                        theta: fit.theta_hat,
                        converged: fit.converged,
                        score_norm: fit.score_norm,
                        iterations: fit.iterations,
                        levels,
                    })
                    .unwrap_or_else(|_| FitRecord::failed(last.theta.clone()));
                if rec.converged {
                    last = rec.clone();
                }
                chain.push(rec);
            }
            chain
        })
        .collect();

    let mut fits: Vec<Vec<FitRecord>> = (0..m_total).map(|_| Vec::with_capacity(grid.b)).collect();
    for chain in by_b {
        for (m, rec) in chain.into_iter().enumerate() {
            fits[m].push(rec);
        }
    }

    let total = grid.b * m_total;
    let fails: Vec<usize> = fits.iter().map(|fs| fs.iter().filter(|f| !f.converged).count()).collect();
    let n_failed: usize = fails.iter().sum();
    let worst = (0..m_total).max_by_key(|&m| (fails[m], m)).unwrap_or(0);
    if n_failed as f64 > opts.max_fail_fraction * total as f64 {
        return Err(Error::SimexConvergence { failed: n_failed, total, worst_zeta: grid.zetas[worst] });
    }
    if n_failed > 0 {
        warn!("{n_failed} of {total} SIMEX fits did not converge and were dropped (worst zeta = {})", grid.zetas[worst]);
    }

    let theta_by_zeta: Vec<Option<ParameterVector>> = fits
        .iter()
        .map(|fs| {
            let ok: Vec<ParameterVector> = fs.iter().filter(|f| f.converged).map(|f| f.theta.clone()).collect();
            average_over_b(&ok).ok()
        })
        .collect();
    let points: Vec<(f64, Vec<f64>)> = theta_by_zeta
        .iter()
        .zip(&grid.zetas)
        .filter_map(|(t, &z)| t.as_ref().map(|t| (z, t.to_vector().iter().copied().collect())))
        .collect();
    let model = fit_extrapolant(&points, opts.extrapolant)?;
    let theta_simex = ParameterVector::from_stacked(&extrapolate_at(&model, -1.0), sample.p());

    Ok(SimexResult {
        family,
        zetas: grid.zetas.clone(),
        b: grid.b,
        seed,
        options: *opts,
        noise_root: root,
        naive,
        fits,
        theta_by_zeta,
        model,
        theta_simex,
        n_failed,
    })
}

/// Profile levels at `theta_simex` for every converged `(b, zeta)`, indexed
/// `[m][b]`.
pub(crate) fn stage4_levels(result: &SimexResult, sample: &Sample) -> Result<Vec<Vec<Option<Vec<f64>>>>> {
    let w = sample.w_matrix();
    let theta = &result.theta_simex;
    let score = result.options.solver.score;
    let base = Problem::new(sample, &w, result.family, score)?.levels(theta, None)?;
    let by_b: Vec<Result<Vec<Option<Vec<f64>>>>> = (0..result.b)
        .into_par_iter()
        .map(|b| {
            let mut out = Vec::with_capacity(result.zetas.len());
            for m in 0..result.zetas.len() {
                if !result.fits[m][b].converged {
                    out.push(None);
                } else if result.zetas[m] == 0.0 {
                    out.push(Some(base.clone()));
                } else {
                    let lat = result.perturbed_latency(&w, b, m);
                    let p = Problem::new(sample, &lat, result.family, score)?;
                    out.push(Some(p.levels(theta, Some(&base))?));
                }
            }
            Ok(out)
        })
        .collect();
    let mut levels: Vec<Vec<Option<Vec<f64>>>> = (0..result.zetas.len()).map(|_| Vec::new()).collect();
    for chain in by_b {
        for (m, l) in chain?.into_iter().enumerate() {
            levels[m].push(l);
        }
    }
    Ok(levels)
}

/// Extrapolated `H` evaluated on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// The extrapolated step function at the event times.
    pub step: StepFunction,
}

/// Stage 4: per-level `b`-averages of the profile `H(.; theta_simex)`,
/// extrapolated pointwise to `zeta = -1` and made monotone by a running
/// maximum.
pub fn simex_h(result: &SimexResult, sample: &Sample, t_grid: &[f64]) -> Result<HCurve> {
    let levels = stage4_levels(result, sample)?;
    let active = result.active_zetas();
    let omega = result.weights()?;
    let k_total = sample.grid().n_events();
    let mut values = vec![0.0; k_total];
    for (k, value) in values.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (a, &m) in active.iter().enumerate() {
            let ok: Vec<f64> = levels[m].iter().flatten().map(|l| l[k]).collect();
            let mean = ok.iter().sum::<f64>() / ok.len() as f64;
            if mean == f64::INFINITY {
                acc = f64::INFINITY;
                break;
            }
            acc += omega[a] * mean;
        }
        *value = acc;
    }
    let mut running = f64::NEG_INFINITY;
    for v in values.iter_mut() {
        running = running.max(*v);
        *v = running;
    }
    let step = StepFunction::new(sample.grid().times().to_vec(), values)?;
    Ok(HCurve {
        times: t_grid.to_vec(),
        values: t_grid.iter().map(|&t| step.evaluate(t)).collect(),
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_quadratic_interpolation() {
        let pts = vec![(0.0, vec![1.0]), (1.0, vec![0.0]), (2.0, vec![1.0])];
        let m = fit_extrapolant(&pts, Extrapolant::Quadratic).unwrap();
        for (a, b) in m.coefficients[0].iter().zip([1.0, -2.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((extrapolate_at(&m, -1.0)[0] - 4.0).abs() < 1e-12);
        assert!((extrapolate_at(&m, 0.0)[0] - m.coefficients[0][0]).abs() < 1e-15);
    }

    #[test]
    fn too_few_points() {
        let pts = vec![(0.0, vec![1.0]), (1.0, vec![0.0])];
        assert!(matches!(fit_extrapolant(&pts, Extrapolant::Quadratic), Err(Error::Extrapolation(_))));
        let dup = vec![(0.0, vec![1.0]), (1.0, vec![0.0]), (1.0, vec![0.5])];
        assert!(fit_extrapolant(&dup, Extrapolant::Quadratic).is_err());
        assert!(fit_extrapolant(&pts, Extrapolant::Linear).is_ok());
    }

    #[test]
    fn weights_reproduce_prediction() {
        let z: Vec<f64> = (0..9).map(|m| m as f64 * 0.25).collect();
        let vals: Vec<f64> = z.iter().map(|&x| 0.3 - 0.2 * x + 0.05 * x * x + (x * 7.0).sin() * 0.01).collect();
        let pts: Vec<(f64, Vec<f64>)> = z.iter().zip(&vals).map(|(&a, &b)| (a, vec![b])).collect();
        let m = fit_extrapolant(&pts, Extrapolant::Quadratic).unwrap();
        let w = extrapolation_weights(&z, Extrapolant::Quadratic, -1.0).unwrap();
        let via_w: f64 = w.iter().zip(&vals).map(|(a, b)| a * b).sum();
        assert!((via_w - extrapolate_at(&m, -1.0)[0]).abs() < 1e-12);
        assert!((w.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_zeta_and_zero_noise_leave_covariates() {
        let w = DMatrix::from_vec(3, 1, vec![2.0, -1.0, 0.5]);
        let mut rng = stream(1, Domain::Perturb, &[0]);
        let s = DMatrix::from_element(1, 1, 0.5);
        assert_eq!(perturb_covariates(&w, 0.0, &s, &mut rng).unwrap(), w);
        let zero = DMatrix::zeros(1, 1);
        assert_eq!(perturb_covariates(&w, 1.5, &zero, &mut rng).unwrap(), w);
        assert!(perturb_covariates(&w, -0.5, &s, &mut rng).is_err());
    }

    #[test]
    fn averaging() {
        let a = ParameterVector::new(vec![1.0], vec![1.0]);
        let b = ParameterVector::new(vec![3.0], vec![3.0]);
        assert_eq!(average_over_b(&[a, b]).unwrap(), ParameterVector::new(vec![2.0], vec![2.0]));
        assert!(average_over_b(&[]).is_err());
    }

    #[test]
    fn covariance_spec_forms() {
        let s: CovarianceSpec = serde_json::from_str("0.5").unwrap();
        assert_eq!(s.to_matrix(1, false).unwrap()[(0, 0)], 0.5);
        assert_eq!(s.to_matrix(1, true).unwrap()[(0, 0)], 0.25);
        let m: CovarianceSpec = serde_json::from_str("[[1.0, 0.2], [0.2, 2.0]]").unwrap();
        assert_eq!(m.to_matrix(2, false).unwrap()[(1, 0)], 0.2);
        let bad: CovarianceSpec = serde_json::from_str("[[1.0, 3.0], [3.0, 1.0]]").unwrap();
        assert!(bad.to_matrix(2, false).is_err());
    }
}
