//! Profiled estimating equations for `theta = (beta, gamma)` and the joint
//! root finder.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{EventGrid, Sample, Subject};
use crate::error::{Error, Result};
use crate::link::{dot, logistic, Family};
use crate::params::ParameterVector;
use crate::profile::{check_inputs, solve_levels, subject_state, Predictors, ProfileOptions};
use crate::step::StepFunction;

/// Covariate weighting the incidence (gamma) equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaWeight {
    #[default]
    Z,
    /// The latency covariates; only valid when `p == q`.
    W,
}

/// Residual used in the incidence equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IncidenceResidual {
    /// `delta + (1 - delta) Gbar(a(H(Y))) - Gbar(a(H(A-)))`, the integral of
    /// `G(a)` against the martingale increments. Unbiased under left
    /// truncation; equals `Marginal` when every `A` precedes the first event.
    #[default]
    Truncated,
    /// `delta + (1 - delta) Gbar(a(H(Y))) - G(z'gamma)`.
    Marginal,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreOptions {
    pub gamma_weight: GammaWeight,
    pub incidence: IncidenceResidual,
    pub profile: ProfileOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Convergence threshold on `max |U_j|`.
    pub tol: f64,
    pub max_iter: usize,
    /// Forward-difference step for the Jacobian (scaled by `max(1, |theta_j|)`).
    pub fd_step: f64,
    pub max_halvings: usize,
    /// Iterations without meaningful decrease of `|U|` before giving up.
    pub stall_limit: usize,
    /// Cap on the infinity norm of a single Newton step.
    pub max_step: f64,
    /// Extra starting points tried, in a fixed order, when the first start
    /// does not converge.
    pub restarts: usize,
    pub score: ScoreOptions,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            fd_step: 1e-5,
            max_halvings: 20,
            stall_limit: 10,
            max_step: 2.0,
            restarts: 8,
            score: ScoreOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: ParameterVector,
    pub h_hat: StepFunction,
    pub converged: bool,
    /// `max |U_j(theta_hat)|`.
    pub score_norm: f64,
    pub iterations: usize,
}

/// `P(pi = 1 | delta, Y, W, Z) = delta + (1 - delta) Gbar(a(H(Y)))`.
pub fn cure_score_weight(
    subject: &Subject,
    w: &[f64],
    theta: &ParameterVector,
    h: &StepFunction,
    family: Family,
) -> f64 {
    if subject.delta {
        return 1.0;
    }
    let s = subject_state(family, h.evaluate(subject.y), dot(w, &theta.beta), dot(&subject.z, &theta.gamma));
    s.gbar
}

/// Estimating problem on a fixed covariate matrix. Holds everything needed
/// to evaluate `U(theta)` repeatedly.
pub(crate) struct Problem<'a> {
    pub grid: &'a EventGrid,
    pub family: Family,
    pub latency: &'a DMatrix<f64>,
    pub incidence: DMatrix<f64>,
    pub delta: Vec<bool>,
    pub opts: ScoreOptions,
}

/// Score and the profile levels it was computed from.
pub(crate) struct ScoreEval {
    pub u: DVector<f64>,
    pub levels: Vec<f64>,
}

#[inline]
pub(crate) fn level_at(levels: &[f64], idx: usize) -> f64 {
    if idx == 0 {
        f64::NEG_INFINITY
    } else {
        levels[idx - 1]
    }
}

impl<'a> Problem<'a> {
    pub fn new(sample: &'a Sample, latency: &'a DMatrix<f64>, family: Family, opts: ScoreOptions) -> Result<Self> {
        if latency.nrows() != sample.n() || latency.ncols() != sample.p() {
            return Err(Error::Domain(format!(
                "latency covariates are {}x{}, sample needs {}x{}",
                latency.nrows(),
                latency.ncols(),
                sample.n(),
                sample.p()
            )));
        }
        if opts.gamma_weight == GammaWeight::W && sample.p() != sample.q() {
            return Err(Error::Config(format!(
                "gamma_weight 'w' needs p == q (p = {}, q = {})",
                sample.p(),
                sample.q()
            )));
        }
        Ok(Self {
            grid: sample.grid(),
            family,
            latency,
            incidence: sample.z_matrix(),
            delta: sample.subjects().iter().map(|s| s.delta).collect(),
            opts,
        })
    }

    pub fn n(&self) -> usize {
        self.delta.len()
    }

    pub fn p(&self) -> usize {
        self.latency.ncols()
    }

    pub fn q(&self) -> usize {
        self.incidence.ncols()
    }

    pub fn predictors(&self, theta: &ParameterVector) -> Predictors {
        Predictors::new(self.family, self.latency, &self.incidence, theta)
    }

    pub fn levels(&self, theta: &ParameterVector, warm: Option<&[f64]>) -> Result<Vec<f64>> {
        solve_levels(self.grid, &self.predictors(theta), &self.opts.profile, warm)
    }

    /// Per-subject residuals `(r1_i, r2_i)`; `U1 = mean w_i r1_i` and
    /// `U2 = mean v_i r2_i`.
    pub fn residuals(&self, pred: &Predictors, levels: &[f64]) -> Vec<(f64, f64)> {
        (0..self.n())
            .map(|i| {
                let d = if self.delta[i] { 1.0 } else { 0.0 };
                let le = level_at(levels, self.grid.entry[i]);
                let lx = level_at(levels, self.grid.exit[i]);
                let sx = subject_state(self.family, lx, pred.xb[i], pred.zg[i]);
                let se = subject_state(self.family, le, pred.xb[i], pred.zg[i]);
                let r1 = d - (sx.log_g - se.log_g);
                let tail = match self.opts.incidence {
                    IncidenceResidual::Truncated => se.gbar,
                    IncidenceResidual::Marginal => logistic(pred.zg[i]),
                };
                let r2 = d + (1.0 - d) * sx.gbar - tail;
                (r1, r2)
            })
            .collect()
    }

    /// Row `i` of the incidence-equation weights.
    #[inline]
    pub fn gamma_weight(&self, i: usize, j: usize) -> f64 {
        match self.opts.gamma_weight {
            GammaWeight::Z => self.incidence[(i, j)],
            GammaWeight::W => self.latency[(i, j)],
        }
    }

    pub fn score_from(&self, pred: &Predictors, levels: &[f64]) -> DVector<f64> {
        let (p, q, n) = (self.p(), self.q(), self.n());
        let mut u = DVector::zeros(p + q);
        for (i, (r1, r2)) in self.residuals(pred, levels).into_iter().enumerate() {
            for j in 0..p {
                u[j] += self.latency[(i, j)] * r1;
            }
            for j in 0..q {
                u[p + j] += self.gamma_weight(i, j) * r2;
            }
        }
        u / n as f64
    }

    pub fn score(&self, theta: &ParameterVector, warm: Option<&[f64]>) -> Result<ScoreEval> {
        let pred = self.predictors(theta);
        let levels = solve_levels(self.grid, &pred, &self.opts.profile, warm)?;
        let u = self.score_from(&pred, &levels);
        Ok(ScoreEval { u, levels })
    }

    /// Forward-difference Jacobian of `U` at `theta`, given `U(theta)`.
    pub fn jacobian_forward(
        &self,
        theta: &ParameterVector,
        base: &ScoreEval,
        step: f64,
    ) -> Result<DMatrix<f64>> {
        let p = self.p();
        let x = theta.to_vector();
        let d = x.len();
        let mut jac = DMatrix::zeros(d, d);
        for j in 0..d {
            let h = step * x[j].abs().max(1.0);
            let mut xp = x.clone();
            xp[j] += h;
            let ev = self.score(&ParameterVector::from_stacked(xp.as_slice(), p), Some(&base.levels))?;
            jac.set_column(j, &((ev.u - &base.u) / h));
        }
        Ok(jac)
    }

    pub fn solve(&self, init: &ParameterVector, opts: &SolverOptions) -> Result<(FitResult, Vec<f64>)> {
        self.solve_warm(init, None, opts)
    }

    /// Damped Newton on the stacked score. `warm` seeds the first profile
    /// solve. If `init` fails, restarts from the best-scoring candidates of
    /// [`Problem::ranked_starts`], keeping the first converged fit (or else
    /// the one with the smallest score).
    pub fn solve_warm(
        &self,
        init: &ParameterVector,
        warm: Option<&[f64]>,
        opts: &SolverOptions,
    ) -> Result<(FitResult, Vec<f64>)> {
        init.check(self.p(), self.q())?;
        let mut best = self.newton(init, warm, opts)?;
        let mut spent = best.0.iterations;
        if !best.0.converged && opts.restarts > 0 {
            for start in self.ranked_starts(init, opts.restarts) {
                let Ok(next) = self.newton(&start, None, opts) else { continue };
                spent += next.0.iterations;
                if next.0.converged || next.0.score_norm < best.0.score_norm {
                    debug!("restart from {:?}: converged = {}", start.to_vector().as_slice(), next.0.converged);
                    best = next;
                }
                if best.0.converged {
                    break;
                }
            }
        }
        best.0.iterations = spent;
        Ok(best)
    }

    /// Up to `count` starting points around `init`, ordered by `|U|`:
    /// offsets of radius 1 and 2 along every axis and, for up to four
    /// coordinates, every sign pattern.
    fn ranked_starts(&self, init: &ParameterVector, count: usize) -> Vec<ParameterVector> {
        let x0 = init.to_vector();
        let d = x0.len();
        let mut offsets: Vec<Vec<f64>> = Vec::new();
        for radius in [1.0, 2.0] {
            for j in 0..d {
                for sign in [1.0, -1.0] {
                    let mut o = vec![0.0; d];
                    o[j] = sign * radius;
                    offsets.push(o);
                }
            }
            if d <= 4 && d > 1 {
                for bits in 0..(1usize << d) {
                    offsets.push((0..d).map(|j| if (bits >> j) & 1 == 1 { -radius } else { radius }).collect());
                }
            }
        }
        let mut scored: Vec<(f64, ParameterVector)> = offsets
            .into_iter()
            .filter_map(|o| {
                let x: Vec<f64> = (0..d).map(|j| x0[j] + o[j]).collect();
                let theta = ParameterVector::from_stacked(&x, self.p());
                let u = self.score(&theta, None).ok()?.u.norm();
                u.is_finite().then_some((u, theta))
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        scored.into_iter().take(count).map(|(_, t)| t).collect()
    }

    fn newton(
        &self,
        init: &ParameterVector,
        warm: Option<&[f64]>,
        opts: &SolverOptions,
    ) -> Result<(FitResult, Vec<f64>)> {
        let p = self.p();
        let mut theta = init.clone();
        let mut cur = self.score(&theta, warm)?;
        let mut norm2 = cur.u.norm();
        let mut stall = 0usize;
        let mut iterations = 0usize;
        let mut converged = cur.u.amax() <= opts.tol;

        while !converged && iterations < opts.max_iter {
            iterations += 1;
            let jac = self.jacobian_forward(&theta, &cur, opts.fd_step)?;
            let newton = jac.clone().lu().solve(&(-&cur.u)).filter(|s| s.iter().all(|v| v.is_finite()));
            let gradient = || {
                let g = jac.transpose() * &cur.u;
                let jg = &jac * &g;
                let denom = jg.norm_squared();
                if denom > 0.0 && denom.is_finite() {
                    Some(-g * (cur.u.dot(&jg) / denom))
                } else {
                    None
                }
            };
            let mut accepted = None;
            let candidates = [newton, None];
            for (attempt, dir) in candidates.into_iter().enumerate() {
                let dir = if attempt == 0 { dir } else { gradient() };
                let Some(mut dir) = dir else { continue };
                let big = dir.amax();
                if big > opts.max_step {
                    dir *= opts.max_step / big;
                }
                if let Some(found) = self.line_search(&theta, &dir, norm2, &cur, opts) {
                    accepted = Some(found);
                    break;
                }
                if attempt == 0 {
                    debug!("newton direction failed line search; trying gradient step");
                }
            }
            let Some((next, ev)) = accepted else {
                debug!("no descent direction at iteration {iterations}");
                break;
            };
            let new_norm = ev.u.norm();
            if new_norm > 0.99 * norm2 {
                stall += 1;
            } else {
                stall = 0;
            }
            theta = ParameterVector::from_stacked(next.as_slice(), p);
            cur = ev;
            norm2 = new_norm;
            converged = cur.u.amax() <= opts.tol;
            if stall >= opts.stall_limit {
                break;
            }
        }
        let score_norm = cur.u.amax();
        let h_hat = StepFunction::from_parts_unchecked(self.grid.times.clone(), cur.levels.clone());
        Ok((
            FitResult {
                theta_hat: theta,
                h_hat,
                converged,
                score_norm,
                iterations,
            },
            cur.levels,
        ))
    }

    fn line_search(
        &self,
        theta: &ParameterVector,
        dir: &DVector<f64>,
        norm2: f64,
        cur: &ScoreEval,
        opts: &SolverOptions,
    ) -> Option<(DVector<f64>, ScoreEval)> {
        let x = theta.to_vector();
        let mut t = 1.0;
        for _ in 0..=opts.max_halvings {
            let trial = &x + dir * t;
            let cand = ParameterVector::from_stacked(trial.as_slice(), self.p());
            if let Ok(ev) = self.score(&cand, Some(&cur.levels)) {
                let nn = ev.u.norm();
                if nn.is_finite() && nn < norm2 {
                    return Some((trial, ev));
                }
            }
            t *= 0.5;
        }
        None
    }
}

/// Stacked score `(U1', U2')'` at `theta`, with `H` profiled out.
pub fn stacked_score(
    theta: &ParameterVector,
    sample: &Sample,
    latency: &DMatrix<f64>,
    family: Family,
    opts: &ScoreOptions,
) -> Result<DVector<f64>> {
    check_inputs(sample, latency, theta)?;
    Ok(Problem::new(sample, latency, family, *opts)?.score(theta, None)?.u)
}

/// Profiled latency score `U1(theta)`.
pub fn score_u1(
    theta: &ParameterVector,
    sample: &Sample,
    latency: &DMatrix<f64>,
    family: Family,
    opts: &ScoreOptions,
) -> Result<DVector<f64>> {
    let u = stacked_score(theta, sample, latency, family, opts)?;
    Ok(u.rows(0, sample.p()).into_owned())
}

/// Profiled incidence score `U2(theta)`.
pub fn score_u2(
    theta: &ParameterVector,
    sample: &Sample,
    latency: &DMatrix<f64>,
    family: Family,
    opts: &ScoreOptions,
) -> Result<DVector<f64>> {
    let u = stacked_score(theta, sample, latency, family, opts)?;
    Ok(u.rows(sample.p(), sample.q()).into_owned())
}

/// Solves `U(theta) = 0` on the given latency covariates.
pub fn solve_theta(
    sample: &Sample,
    latency: &DMatrix<f64>,
    family: Family,
    init: &ParameterVector,
    opts: &SolverOptions,
) -> Result<FitResult> {
    check_inputs(sample, latency, init)?;
    let problem = Problem::new(sample, latency, family, opts.score)?;
    Ok(problem.solve(init, opts)?.0)
}

/// The estimator that plugs the error-prone `W` in directly.
pub fn naive_fit(sample: &Sample, family: Family, init: &ParameterVector, opts: &SolverOptions) -> Result<FitResult> {
    solve_theta(sample, &sample.w_matrix(), family, init, opts)
}

/// `sum_i M_i(tau)`: total observed events minus total compensator mass.
pub fn martingale_total(
    sample: &Sample,
    latency: &DMatrix<f64>,
    theta: &ParameterVector,
    h: &StepFunction,
    family: Family,
) -> Result<f64> {
    check_inputs(sample, latency, theta)?;
    let mut total = 0.0;
    for (i, s) in sample.subjects().iter().enumerate() {
        let w: Vec<f64> = latency.row(i).iter().copied().collect();
        let xb = dot(&w, &theta.beta);
        let zg = dot(&s.z, &theta.gamma);
        let entry = h.jump_times().partition_point(|&t| t < s.a);
        let before = if entry == 0 { f64::NEG_INFINITY } else { h.values()[entry - 1] };
        let after = h.evaluate(s.y);
        let comp = subject_state(family, after, xb, zg).log_g - subject_state(family, before, xb, zg).log_g;
        total += if s.delta { 1.0 } else { 0.0 } - comp;
    }
    Ok(total)
}
