//! Sandwich covariance for the SIMEX estimator of `theta` and pointwise
//! influence-based variance for the extrapolated `H`.
//!
//! All kernels live on the event grid. With `E_k(H, theta)` the profile
//! equation at event `k`, `J_H = dE/dH` is lower bidiagonal with diagonal
//! `d_k = sum_{R_k} Psi(H_k)` and subdiagonal `-e_k`,
//! `e_k = sum_{R_k} Psi(H_{k-1})`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::estimate::{level_at, IncidenceResidual, Problem, ScoreOptions};
use crate::link::{logistic, Family};
use crate::params::ParameterVector;
use crate::profile::{subject_state, Predictors, SubjectState};
use crate::simex::{stage4_levels, SimexResult};
use crate::step::StepFunction;

/// How the per-subject influence vectors are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeatForm {
    /// Linearization of the profiled score in the martingale increments,
    /// `B_i = u_i + sum_k phi_k dM_ik` with `phi = J_H^{-T} d(nU)/dH`.
    /// Sums to `n U` exactly.
    #[default]
    Linearized,
    /// `int (Phi_1i - phi_i) dM_i` with `phi_i` built from `Phi_3i` and the
    /// kernel `B(t, s)`, following the appendix displays literally.
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VarianceOptions {
    pub meat: MeatForm,
    /// Central-difference step for the bread and for `dH/dtheta`, scaled by
    /// `max(1, |theta_j|)`.
    pub fd_step: f64,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        Self { meat: MeatForm::Linearized, fd_step: 1e-5 }
    }
}

/// Plug-in kernels at a fitted `(H, theta)` on one covariate matrix.
#[derive(Debug, Clone)]
pub struct InfluenceKernels {
    pub family: Family,
    pub times: Vec<f64>,
    pub levels: Vec<f64>,
    /// `d_k = sum_{R_k} Psi_i(H_k)`.
    pub risk_psi: Vec<f64>,
    /// `e_k = sum_{R_k} Psi_i(H_{k-1})`.
    pub risk_psi_prev: Vec<f64>,
    /// `(p + q) x K`; column `k - 1` multiplies `dM_ik`.
    pub phi: DMatrix<f64>,
    /// `n x (p + q)` score contributions; `n U = sum_i u_i`.
    pub contributions: DMatrix<f64>,
    /// `dM_ik` for `k = entry_i + 1 ..= exit_i`.
    pub increments: Vec<Vec<f64>>,
    pub entry: Vec<usize>,
    pub exit: Vec<usize>,
    pub delta: Vec<bool>,
    p: usize,
    xb: Vec<f64>,
    zg: Vec<f64>,
    /// `n x (p + q)`: latency covariates, then incidence-equation weights.
    weights: DMatrix<f64>,
    incidence: DMatrix<f64>,
    score: ScoreOptions,
}

impl InfluenceKernels {
    pub fn n(&self) -> usize {
        self.delta.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    fn state(&self, i: usize, k: usize) -> SubjectState {
        subject_state(self.family, level_at(&self.levels, k), self.xb[i], self.zg[i])
    }

    /// `Psi_i` at level `k`; level 0 is `H = -inf`.
    pub fn psi(&self, i: usize, k: usize) -> f64 {
        self.state(i, k).psi
    }

    /// `G(Lambda(H_k + w_i'beta) - z_i'gamma)`.
    pub fn g(&self, i: usize, k: usize) -> f64 {
        self.state(i, k).g
    }

    /// `B(t_k, t_j)` for `k <= j`.
    pub fn b_kernel(&self, k: usize, j: usize) -> f64 {
        let s = self.b_exponent_prefix();
        (-(s[j] - s[k])).exp()
    }

    /// `S_l = sum_{l' <= l} E{zeta dN}(t_l') / E{Psi R}(t_l')`, where the
    /// `d/dt log lambda` part of `zeta_i` is the jump increment of
    /// `log lambda(H + w'beta)` at the subject's own event.
    fn b_exponent_prefix(&self) -> Vec<f64> {
        let k_total = self.times.len();
        let mut num = vec![0.0; k_total + 1];
        for i in 0..self.n() {
            if !self.delta[i] || self.exit[i] == 0 {
                continue;
            }
            let l = self.exit[i];
            let now = self.state(i, l);
            let x_now = level_at(&self.levels, l) + self.xb[i];
            let x_before = level_at(&self.levels, l - 1) + self.xb[i];
            let dlog = self.family.log_hazard_raw(x_now) - self.family.log_hazard_raw(x_before);
            let dlog = if dlog.is_finite() { dlog } else { 0.0 };
            let jump = if now.lambda.is_finite() { now.lambda * now.g } else { 0.0 };
            num[l] += dlog - jump;
        }
        let mut prefix = vec![0.0; k_total + 1];
        for l in 1..=k_total {
            let d = self.risk_psi[l - 1];
            let c = if d > 0.0 { num[l] / d } else { 0.0 };
            prefix[l] = prefix[l - 1] + if c.is_finite() { c } else { 0.0 };
        }
        prefix
    }

    /// Per-subject influence vectors, `n x (p + q)`.
    pub fn meat(&self, form: MeatForm) -> DMatrix<f64> {
        match form {
            MeatForm::Linearized => self.meat_linearized(),
            MeatForm::Printed => self.meat_printed(),
        }
    }

    fn meat_linearized(&self) -> DMatrix<f64> {
        let mut out = self.contributions.clone();
        for i in 0..self.n() {
            for (off, dm) in self.increments[i].iter().enumerate() {
                let col = self.entry[i] + off;
                for j in 0..self.dim() {
                    out[(i, j)] += self.phi[(j, col)] * dm;
                }
            }
        }
        out
    }

    /// The appendix `phi_i(t)` on the event grid, `(p + q) x K`.
    pub fn phi_printed(&self) -> DMatrix<f64> {
        let d = self.dim();
        let p = self.p;
        let prefix = self.b_exponent_prefix();
        let mut phi = DMatrix::zeros(d, self.times.len());
        for j in 0..self.n() {
            let x = self.exit[j];
            if x == 0 {
                continue;
            }
            let sx = self.state(j, x);
            let cure = if self.delta[j] { 0.0 } else { sx.g };
            for k in (self.entry[j] + 1)..=x {
                let dk = self.risk_psi[k - 1];
                if dk <= 0.0 {
                    continue;
                }
                let scale = sx.psi * (-(prefix[x] - prefix[k])).exp() / dk;
                for c in 0..p {
                    phi[(c, k - 1)] += self.weights[(j, c)] * scale;
                }
                for c in p..d {
                    phi[(c, k - 1)] += self.weights[(j, c)] * cure * scale;
                }
            }
        }
        phi
    }

    fn meat_printed(&self) -> DMatrix<f64> {
        let d = self.dim();
        let phi = self.phi_printed();
        let mut out = DMatrix::zeros(self.n(), d);
        for i in 0..self.n() {
            for (off, dm) in self.increments[i].iter().enumerate() {
                let k = self.entry[i] + off + 1;
                let g = self.g(i, k);
                for c in 0..d {
                    let phi1 = if c < self.p { self.weights[(i, c)] } else { self.weights[(i, c)] * g };
                    out[(i, c)] += (phi1 - phi[(c, k - 1)]) * dm;
                }
            }
        }
        out
    }

    /// `J_H^{-1} r` by forward substitution; saturated steps map to 0.
    pub fn solve_h(&self, r: &[f64]) -> Vec<f64> {
        let k_total = self.times.len();
        let mut y = vec![0.0; k_total];
        let mut prev = 0.0;
        for k in 0..k_total {
            let d = self.risk_psi[k];
            y[k] = if d > 0.0 && self.levels[k].is_finite() {
                (r[k] + self.risk_psi_prev[k] * prev) / d
            } else {
                0.0
            };
            prev = y[k];
        }
        y
    }

    /// `-(1/n) dU/dtheta` from the kernels, by implicit differentiation of
    /// the profile equations.
    pub fn analytic_bread(&self) -> DMatrix<f64> {
        let n = self.n();
        let d = self.dim();
        let p = self.p;
        let q = d - p;
        let k_total = self.times.len();
        // dL/dtheta at level k: (Psi w, -Gbar z)
        let dl = |i: usize, s: &SubjectState| -> DVector<f64> {
            let mut v = DVector::zeros(d);
            for j in 0..p {
                v[j] = s.psi * self.weights[(i, j)];
            }
            for j in 0..q {
                v[p + j] = -s.gbar * self.incidence[(i, j)];
            }
            v
        };
        // dGbar/dtheta at level k: (-G Psi w, G Gbar z)
        let dgbar = |i: usize, s: &SubjectState| -> DVector<f64> {
            let mut v = DVector::zeros(d);
            for j in 0..p {
                v[j] = -s.g * s.psi * self.weights[(i, j)];
            }
            for j in 0..q {
                v[p + j] = s.g * s.gbar * self.incidence[(i, j)];
            }
            v
        };
        let mut direct = DMatrix::zeros(d, d);
        let mut de = DMatrix::zeros(k_total, d);
        for i in 0..n {
            let (e, x) = (self.entry[i], self.exit[i]);
            let se = self.state(i, e);
            let sx = self.state(i, x);
            let dlx = dl(i, &sx);
            let dle = dl(i, &se);
            let dr1 = -(&dlx - &dle);
            let not_d = if self.delta[i] { 0.0 } else { 1.0 };
            let mut dr2 = dgbar(i, &sx) * not_d;
            match self.score.incidence {
                IncidenceResidual::Truncated => dr2 -= dgbar(i, &se),
                IncidenceResidual::Marginal => {
                    let g = logistic(self.zg[i]);
                    for j in 0..q {
                        dr2[p + j] -= g * (1.0 - g) * self.incidence[(i, j)];
                    }
                }
            }
            for r in 0..p {
                for c in 0..d {
                    direct[(r, c)] += self.weights[(i, r)] * dr1[c];
                }
            }
            for r in p..d {
                for c in 0..d {
                    direct[(r, c)] += self.weights[(i, r)] * dr2[c];
                }
            }
            for k in (e + 1)..=x {
                let now = dl(i, &self.state(i, k));
                let before = dl(i, &self.state(i, k - 1));
                for c in 0..d {
                    de[(k - 1, c)] += now[c] - before[c];
                }
            }
        }
        // n dU/dtheta = direct - phi' dE/dtheta
        let total = direct - &self.phi * de;
        -total / n as f64
    }
}

/// Kernels at `(H, theta)`; `h` must jump at the sample's event times.
pub fn compute_kernels(
    sample: &Sample,
    latency: &DMatrix<f64>,
    h: &StepFunction,
    theta: &ParameterVector,
    family: Family,
    score: &ScoreOptions,
) -> Result<InfluenceKernels> {
    if h.jump_times() != sample.grid().times() {
        return Err(Error::Domain("H must jump exactly at the sample's event times".into()));
    }
    let problem = Problem::new(sample, latency, family, *score)?;
    theta.check(problem.p(), problem.q())?;
    kernels_from(&problem, theta, h.values())
}

pub(crate) fn kernels_from(problem: &Problem, theta: &ParameterVector, levels: &[f64]) -> Result<InfluenceKernels> {
    let grid = problem.grid;
    let k_total = grid.n_events();
    if k_total == 0 {
        return Err(Error::NotEstimable);
    }
    let n = problem.n();
    let (p, q) = (problem.p(), problem.q());
    let d = p + q;
    let family = problem.family;
    let pred: Predictors = problem.predictors(theta);
    let state = |i: usize, k: usize| subject_state(family, level_at(levels, k), pred.xb[i], pred.zg[i]);

    let mut weights = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        for j in 0..p {
            weights[(i, j)] = problem.latency[(i, j)];
        }
        for j in 0..q {
            weights[(i, p + j)] = problem.gamma_weight(i, j);
        }
    }

    let mut risk_psi = vec![0.0; k_total];
    let mut risk_psi_prev = vec![0.0; k_total];
    for k in 1..=k_total {
        for &i in grid.risk_set(k) {
            let i = i as usize;
            risk_psi[k - 1] += state(i, k).psi;
            risk_psi_prev[k - 1] += state(i, k - 1).psi;
        }
        if levels[k - 1].is_finite() && !(risk_psi[k - 1] > 0.0) {
            return Err(Error::DegenerateRisk(grid.times[k - 1]));
        }
    }

    // g = d(nU)/dH, (p + q) x K
    let mut g = DMatrix::<f64>::zeros(d, k_total);
    let mut contributions = DMatrix::zeros(n, d);
    let mut increments = Vec::with_capacity(n);
    let residuals = problem.residuals(&pred, levels);
    for i in 0..n {
        let (e, x) = (grid.entry[i], grid.exit[i]);
        let delta = problem.delta[i];
        let (r1, r2) = residuals[i];
        for j in 0..p {
            contributions[(i, j)] = weights[(i, j)] * r1;
        }
        for j in p..d {
            contributions[(i, j)] = weights[(i, j)] * r2;
        }
        if x > 0 {
            let sx = state(i, x);
            let not_d = if delta { 0.0 } else { 1.0 };
            for j in 0..p {
                g[(j, x - 1)] -= weights[(i, j)] * sx.psi;
            }
            for j in p..d {
                g[(j, x - 1)] -= weights[(i, j)] * not_d * sx.g * sx.psi;
            }
        }
        if e > 0 {
            let se = state(i, e);
            for j in 0..p {
                g[(j, e - 1)] += weights[(i, j)] * se.psi;
            }
            if problem.opts.incidence == IncidenceResidual::Truncated {
                for j in p..d {
                    g[(j, e - 1)] += weights[(i, j)] * se.g * se.psi;
                }
            }
        }
        let mut inc = Vec::with_capacity(x.saturating_sub(e));
        let mut before = state(i, e).log_g;
        for k in (e + 1)..=x {
            let now = state(i, k).log_g;
            let dn = if delta && k == x { 1.0 } else { 0.0 };
            inc.push(dn - (now - before));
            before = now;
        }
        increments.push(inc);
    }

    // phi = J_H^{-T} g by backward substitution
    let mut phi = DMatrix::<f64>::zeros(d, k_total);
    for j in 0..d {
        let mut next = 0.0;
        for k in (0..k_total).rev() {
            let dk = risk_psi[k];
            let carry = if k + 1 < k_total { risk_psi_prev[k + 1] * next } else { 0.0 };
            let v = if dk > 0.0 && levels[k].is_finite() { (g[(j, k)] + carry) / dk } else { 0.0 };
            phi[(j, k)] = v;
            next = v;
        }
    }

    Ok(InfluenceKernels {
        family,
        times: grid.times.clone(),
        levels: levels.to_vec(),
        risk_psi,
        risk_psi_prev,
        phi,
        contributions,
        increments,
        entry: grid.entry.clone(),
        exit: grid.exit.clone(),
        delta: problem.delta.clone(),
        p,
        xb: pred.xb,
        zg: pred.zg,
        weights,
        incidence: problem.incidence.clone(),
        score: problem.opts,
    })
}

/// Central-difference Jacobian of `f` at `x` with steps `step * max(1, |x_j|)`.
pub fn central_jacobian<F>(f: F, x: &DVector<f64>, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut cols = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let h = step * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        cols.push((f(&xp)? - f(&xm)?) / (2.0 * h));
    }
    let rows = cols.first().map_or(0, |c| c.len());
    Ok(DMatrix::from_fn(rows, x.len(), |r, c| cols[c][r]))
}

/// `A = -dU/dtheta` at `theta` by central differences. Not symmetrized.
pub fn bread_matrix(
    theta: &ParameterVector,
    sample: &Sample,
    latency: &DMatrix<f64>,
    family: Family,
    score: &ScoreOptions,
    fd_step: f64,
) -> Result<DMatrix<f64>> {
    let problem = Problem::new(sample, latency, family, *score)?;
    theta.check(problem.p(), problem.q())?;
    let warm = problem.levels(theta, None)?;
    bread_from(&problem, theta, &warm, fd_step)
}

pub(crate) fn bread_from(problem: &Problem, theta: &ParameterVector, warm: &[f64], fd_step: f64) -> Result<DMatrix<f64>> {
    let p = problem.p();
    let warm = (!warm.is_empty()).then_some(warm);
    let jac = central_jacobian(
        |x| Ok(problem.score(&ParameterVector::from_stacked(x.as_slice(), p), warm)?.u),
        &theta.to_vector(),
        fd_step,
    )?;
    Ok(-jac)
}

fn invert_bread(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sv = a.clone().svd(false, false).singular_values;
    let (max, min) = (sv.max(), sv.min());
    if !(max.is_finite() && min > max * 1e-13) {
        return Err(Error::Variance(format!("bread matrix is singular (singular values {min:.3e} to {max:.3e})")));
    }
    a.clone()
        .try_inverse()
        .ok_or_else(|| Error::Variance("bread matrix is singular".into()))
}

/// Influence vectors `A^{-1} B_i` of one fit, `n x (p + q)`.
pub(crate) fn fit_influence(
    problem: &Problem,
    theta: &ParameterVector,
    levels: &[f64],
    opts: &VarianceOptions,
) -> Result<DMatrix<f64>> {
    let kernels = kernels_from(problem, theta, levels)?;
    let bread = bread_from(problem, theta, levels, opts.fd_step)?;
    let ainv = invert_bread(&bread)?;
    Ok(kernels.meat(opts.meat) * ainv.transpose())
}

/// Covariance across rows with `1/(n - 1)`.
fn row_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mean = x.row_mean();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    let denom = (n.max(2) - 1) as f64;
    c.transpose() * c / denom
}

/// Symmetrizes and clips negative eigenvalues at zero.
pub fn project_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return (sym, false);
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    ((&out + out.transpose()) * 0.5, true)
}

fn finish_covariance(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Variance(format!("{what} has non-finite entries")));
    }
    let (out, clipped) = project_psd(&m);
    if clipped {
        warn!("{what} had negative eigenvalues; clipped to zero");
    }
    Ok(out)
}

/// `A^{-1} cov(B_i) A^{-T} / n` for a single fit.
pub fn naive_sandwich(
    sample: &Sample,
    latency: &DMatrix<f64>,
    fit_theta: &ParameterVector,
    h: &StepFunction,
    family: Family,
    score: &ScoreOptions,
    opts: &VarianceOptions,
) -> Result<DMatrix<f64>> {
    let problem = Problem::new(sample, latency, family, *score)?;
    fit_theta.check(problem.p(), problem.q())?;
    if h.jump_times() != sample.grid().times() {
        return Err(Error::Domain("H must jump exactly at the sample's event times".into()));
    }
    let infl = fit_influence(&problem, fit_theta, h.values(), opts)?;
    finish_covariance(row_covariance(&infl) / problem.n() as f64, "sandwich covariance")
}

/// Pieces of the SIMEX sandwich.
#[derive(Debug, Clone)]
pub struct SandwichPieces {
    /// The grid levels that entered the extrapolation.
    pub zetas: Vec<f64>,
    /// `Bbar_i(zeta)`: one `n x (p + q)` matrix per active level.
    pub bbar: Vec<DMatrix<f64>>,
    pub omega: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// `d phi / d Gamma` at `zeta = -1`.
    pub gradient: DMatrix<f64>,
}

impl SandwichPieces {
    /// `iota_i = sum_m omega_m Bbar_i(zeta_m)`, the influence of subject `i`
    /// on `theta_simex`.
    pub fn simex_influence(&self, omega: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.bbar[0].nrows(), self.bbar[0].ncols());
        for (w, b) in omega.iter().zip(&self.bbar) {
            out += b * *w;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ThetaCovariance {
    pub covariance: DMatrix<f64>,
    pub pieces: SandwichPieces,
}

/// Stacked design Jacobian `C` for a polynomial extrapolant fitted
/// coordinate-wise: rows `(m, j)`, columns `(j, k)`.
pub fn extrapolation_design(zetas: &[f64], dim: usize, degree: usize) -> DMatrix<f64> {
    let cols = degree + 1;
    let mut c = DMatrix::zeros(zetas.len() * dim, dim * cols);
    for (m, z) in zetas.iter().enumerate() {
        for j in 0..dim {
            for k in 0..cols {
                c[(m * dim + j, j * cols + k)] = z.powi(k as i32);
            }
        }
    }
    c
}

/// `d phi(zeta, Gamma) / d Gamma`, `dim x dim (degree + 1)`.
pub fn extrapolation_gradient(at: f64, dim: usize, degree: usize) -> DMatrix<f64> {
    let cols = degree + 1;
    let mut g = DMatrix::zeros(dim, dim * cols);
    for j in 0..dim {
        for k in 0..cols {
            g[(j, j * cols + k)] = at.powi(k as i32);
        }
    }
    g
}

/// Per-level `b`-averaged influences `Bbar_i(zeta_m)` over the active grid.
pub(crate) fn bbar_by_zeta(result: &SimexResult, sample: &Sample, opts: &VarianceOptions) -> Result<Vec<DMatrix<f64>>> {
    let w = sample.w_matrix();
    let score = result.options.solver.score;
    let active = result.active_zetas();
    let naive_levels = result.fits[0].first().map(|f| f.levels.clone()).unwrap_or_default();
    let zero_influence = if result.zetas[0] == 0.0 && result.fits[0].iter().any(|f| f.converged) {
        let problem = Problem::new(sample, &w, result.family, score)?;
        Some(fit_influence(&problem, &result.fits[0][0].theta, &naive_levels, opts)?)
    } else {
        None
    };
    let tasks: Vec<(usize, usize)> = active
        .iter()
        .flat_map(|&m| (0..result.b).map(move |b| (m, b)))
        .filter(|&(m, b)| result.fits[m][b].converged && !(result.zetas[m] == 0.0 && zero_influence.is_some()))
        .collect();
    let computed: Vec<Result<DMatrix<f64>>> = tasks
        .par_iter()
        .map(|&(m, b)| {
            let lat = result.perturbed_latency(&w, b, m);
            let problem = Problem::new(sample, &lat, result.family, score)?;
            let rec = &result.fits[m][b];
            fit_influence(&problem, &rec.theta, &rec.levels, opts)
        })
        .collect();
    let n = sample.n();
    let d = sample.p() + sample.q();
    let mut sums: Vec<DMatrix<f64>> = active.iter().map(|_| DMatrix::zeros(n, d)).collect();
    let mut counts = vec![0usize; active.len()];
    for (&(m, _), infl) in tasks.iter().zip(computed) {
        let a = active.iter().position(|&x| x == m).unwrap_or(0);
        sums[a] += infl?;
        counts[a] += 1;
    }
    for (a, &m) in active.iter().enumerate() {
        if result.zetas[m] == 0.0 {
            if let Some(z) = &zero_influence {
                sums[a] = z.clone();
                counts[a] = 1;
            }
        }
        if counts[a] == 0 {
            return Err(Error::Variance(format!("no usable fits at zeta = {}", result.zetas[m])));
        }
        sums[a] /= counts[a] as f64;
    }
    Ok(sums)
}

/// Sandwich covariance of `theta_simex`,
/// `(dphi/dGamma) D^{-1} C' Omega C D^{-1} (dphi/dGamma)' / n`.
pub fn theta_covariance(result: &SimexResult, sample: &Sample, opts: &VarianceOptions) -> Result<ThetaCovariance> {
    let bbar = bbar_by_zeta(result, sample, opts)?;
    let zetas: Vec<f64> = result.active_zetas().iter().map(|&m| result.zetas[m]).collect();
    let n = sample.n();
    let dim = sample.p() + sample.q();
    let degree = result.options.extrapolant.degree();

    let mut stacked = DMatrix::zeros(n, zetas.len() * dim);
    for (m, b) in bbar.iter().enumerate() {
        stacked.columns_mut(m * dim, dim).copy_from(b);
    }
    let omega = row_covariance(&stacked);
    let c = extrapolation_design(&zetas, dim, degree);
    let d = c.transpose() * &c;
    let dinv = d
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Variance("extrapolation normal matrix D is singular".into()))?;
    let q = &dinv * c.transpose() * &omega * &c * &dinv;
    let gradient = extrapolation_gradient(-1.0, dim, degree);
    let raw = &gradient * &q * gradient.transpose() / n as f64;
    let asym = (&raw - raw.transpose()).amax();
    if asym > 1e-10 * raw.amax().max(1.0) {
        warn!("theta covariance asymmetric by {asym:.3e} before projection");
    }
    let covariance = finish_covariance(raw, "theta covariance")?;
    Ok(ThetaCovariance { covariance, pieces: SandwichPieces { zetas, bbar, omega, c, d, q, gradient } })
}

/// Standard-normal quantile for a two-sided interval of the given level.
pub fn normal_quantile(level: f64) -> f64 {
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    std.inverse_cdf(0.5 + level / 2.0)
}

/// `theta_k +- z sqrt(cov_kk)`.
pub fn wald_interval(theta: &[f64], covariance: &DMatrix<f64>, level: f64) -> Result<Vec<(f64, f64)>> {
    if covariance.nrows() != theta.len() || covariance.ncols() != theta.len() {
        return Err(Error::Variance("covariance does not match theta".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Variance(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let z = normal_quantile(level);
    theta
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let v = covariance[(k, k)];
            if v < 0.0 || v.is_nan() {
                return Err(Error::Variance(format!("negative variance {v} for coordinate {k}")));
            }
            let half = z * v.sqrt();
            Ok((t - half, t + half))
        })
        .collect()
}

/// Pointwise variance of the extrapolated `H` on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HVariance {
    pub times: Vec<f64>,
    pub variance: Vec<f64>,
    /// `E{H_i(t) H_i(s)} / n` over the grid, PSD after clipping.
    pub covariance: Vec<Vec<f64>>,
}

/// Influence-based variance of `H_simex(t)` on `t_grid`.
pub fn h_covariance(
    result: &SimexResult,
    sample: &Sample,
    theta_cov: &ThetaCovariance,
    t_grid: &[f64],
    opts: &VarianceOptions,
) -> Result<HVariance> {
    let w = sample.w_matrix();
    let score = result.options.solver.score;
    let active = result.active_zetas();
    let omega = result.weights()?;
    let iota = theta_cov.pieces.simex_influence(&omega);
    let theta = result.theta_simex.clone();
    let p = sample.p();
    let n = sample.n();
    let times = sample.grid().times().to_vec();
    let index: Vec<usize> = t_grid.iter().map(|&t| times.partition_point(|&x| x <= t)).collect();
    let levels = stage4_levels(result, sample)?;

    let tasks: Vec<(usize, usize, usize)> = active
        .iter()
        .enumerate()
        .flat_map(|(a, &m)| (0..result.b).map(move |b| (a, m, b)))
        .filter(|&(_, m, b)| levels[m][b].is_some())
        .collect();
    let per_task: Vec<Result<DMatrix<f64>>> = tasks
        .par_iter()
        .map(|&(_, m, b)| {
            let lat = result.perturbed_latency(&w, b, m);
            let problem = Problem::new(sample, &lat, result.family, score)?;
            let base = levels[m][b].as_deref().unwrap_or(&[]);
            let kernels = kernels_from(&problem, &theta, base)?;
            let x = theta.to_vector();
            // A(t) = dH(t; theta)/dtheta at theta_simex
            let slope = central_jacobian(
                |v| {
                    let l = problem.levels(&ParameterVector::from_stacked(v.as_slice(), p), Some(base))?;
                    Ok(DVector::from_vec(l))
                },
                &x,
                opts.fd_step,
            )?;
            let mut t_mat = DMatrix::zeros(n, t_grid.len());
            for i in 0..n {
                let mut r = vec![0.0; times.len()];
                for (off, dm) in kernels.increments[i].iter().enumerate() {
                    r[kernels.entry[i] + off] = *dm;
                }
                let y = kernels.solve_h(&r);
                for (c, &k) in index.iter().enumerate() {
                    if k == 0 {
                        continue;
                    }
                    let mut v = n as f64 * y[k - 1];
                    for j in 0..x.len() {
                        let s = slope[(k - 1, j)];
                        if s.is_finite() {
                            v += s * iota[(i, j)];
                        }
                    }
                    t_mat[(i, c)] = if v.is_finite() { v } else { 0.0 };
                }
            }
            Ok(t_mat)
        })
        .collect();

    let mut sums: Vec<DMatrix<f64>> = active.iter().map(|_| DMatrix::zeros(n, t_grid.len())).collect();
    let mut counts = vec![0usize; active.len()];
    for (&(a, _, _), t_mat) in tasks.iter().zip(per_task) {
        sums[a] += t_mat?;
        counts[a] += 1;
    }
    let mut infl = DMatrix::zeros(n, t_grid.len());
    for a in 0..active.len() {
        if counts[a] > 0 {
            infl += &sums[a] * (omega[a] / counts[a] as f64);
        }
    }
    let cov = infl.transpose() * &infl / (n as f64 * n as f64);
    let cov = finish_covariance(cov, "H covariance")?;
    let variance = (0..t_grid.len()).map(|c| cov[(c, c)].max(0.0)).collect();
    let covariance = (0..t_grid.len()).map(|r| cov.row(r).iter().copied().collect()).collect();
    Ok(HVariance { times: t_grid.to_vec(), variance, covariance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Subject;
    use crate::estimate::naive_fit;
    use crate::estimate::SolverOptions;

    fn toy() -> Sample {
        let rows = [
            (0.8, 0.0, true, 0.4, 1.2),
            (1.3, 0.2, false, -0.7, 0.3),
            (1.9, 0.5, true, 1.1, 2.0),
            (2.4, 0.1, true, -0.2, -1.7),
            (3.0, 1.0, false, 0.5, -0.4),
            (3.3, 0.0, true, -1.4, 2.5),
            (4.1, 2.0, false, 0.9, 0.8),
            (1.9, 0.3, true, 0.0, 1.9),
            (5.0, 0.0, false, -0.3, -2.2),
            (2.2, 0.6, false, 1.6, 0.1),
        ];
        Sample::new(
            rows.iter()
                .map(|&(y, a, d, w, z)| Subject::new(y, a, d, vec![w], vec![z]))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn score_identity_and_bread_agree() {
        let s = toy();
        for family in [Family::Ph, Family::Po] {
            for incidence in [IncidenceResidual::Truncated, IncidenceResidual::Marginal] {
                let score = ScoreOptions { incidence, ..Default::default() };
                let theta = ParameterVector::new(vec![0.3], vec![0.4]);
                let h = crate::profile::solve_profile_h(&s, &s.w_matrix(), &theta, family, &score.profile).unwrap();
                let k = compute_kernels(&s, &s.w_matrix(), &h, &theta, family, &score).unwrap();
                let u = crate::estimate::stacked_score(&theta, &s, &s.w_matrix(), family, &score).unwrap();
                let total = k.meat(MeatForm::Linearized).row_sum().transpose();
                assert!((total - &u * s.n() as f64).amax() < 1e-10);
                let fd = bread_matrix(&theta, &s, &s.w_matrix(), family, &score, 1e-5).unwrap();
                let an = k.analytic_bread();
                assert!((&fd - &an).amax() < 1e-5 * an.amax().max(1.0), "{fd} {an}");
            }
        }
    }

    #[test]
    fn wald_closed_form() {
        let cov = DMatrix::from_row_slice(1, 1, &[0.04]);
        let ci = wald_interval(&[1.0], &cov, 0.95).unwrap();
        assert!((ci[0].0 - 0.608).abs() < 1e-3 && (ci[0].1 - 1.392).abs() < 1e-3);
        let zero = DMatrix::zeros(1, 1);
        assert_eq!(wald_interval(&[2.0], &zero, 0.95).unwrap(), vec![(2.0, 2.0)]);
        let neg = DMatrix::from_row_slice(1, 1, &[-1.0]);
        assert!(matches!(wald_interval(&[0.0], &neg, 0.95), Err(Error::Variance(_))));
    }

    #[test]
    fn naive_sandwich_is_psd() {
        let s = toy();
        let fit = naive_fit(&s, Family::Ph, &ParameterVector::zeros(1, 1), &SolverOptions::default()).unwrap();
        let v = naive_sandwich(
            &s,
            &s.w_matrix(),
            &fit.theta_hat,
            &fit.h_hat,
            Family::Ph,
            &ScoreOptions::default(),
            &VarianceOptions::default(),
        )
        .unwrap();
        assert!(v.symmetric_eigen().eigenvalues.iter().all(|&e| e >= 0.0));
    }
}
