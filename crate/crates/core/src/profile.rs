//! Profile estimation of the transformation `H` at fixed `theta`.
//!
//! `H` is a step function with jumps at the distinct event times. Writing
//! `L_i(h) = log G(Lambda{h + w_i'beta} - z_i'gamma)`, the jump value `H_k`
//! solves
//!
//! ```text
//! sum_{i in R(t_k)} [L_i(H_k) - L_i(H_{k-1})] = dN(t_k),     H_0 = -inf,
//! ```
//!
//! one event at a time. The left side is strictly increasing in `H_k` and
//! bounded by `-sum L_i(H_{k-1})`, so each step has at most one root.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{at_risk, EventGrid, Sample};
use crate::error::{Error, Result};
use crate::link::{dot, Family};
use crate::params::ParameterVector;
use crate::step::StepFunction;

/// What to do when a step's equation has no finite root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailPolicy {
    /// Fail with [`Error::TailDivergence`].
    Error,
    /// Set the step (and every later step) to `+inf`, i.e. population
    /// survival drops to the cure fraction. Scores remain continuous in
    /// `theta` across the onset of saturation.
    #[default]
    Saturate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileOptions {
    pub tail: TailPolicy,
    /// Absolute tolerance on each jump value.
    pub tol: f64,
    /// Bracket expansions allowed per step.
    pub max_doublings: u32,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            tail: TailPolicy::Saturate,
            tol: 1e-10,
            max_doublings: 60,
        }
    }
}

impl ProfileOptions {
    pub fn strict() -> Self {
        Self {
            tail: TailPolicy::Error,
            ..Self::default()
        }
    }
}

/// Per-subject linear predictors at a fixed `theta`.
#[derive(Debug, Clone)]
pub(crate) struct Predictors {
    pub family: Family,
    pub xb: Vec<f64>,
    /// `exp(xb)`, used by the PH fast path.
    pub exb: Vec<f64>,
    pub zg: Vec<f64>,
}

impl Predictors {
    pub fn new(
        family: Family,
        latency: &DMatrix<f64>,
        incidence: &DMatrix<f64>,
        theta: &ParameterVector,
    ) -> Self {
        let n = latency.nrows();
        let xb: Vec<f64> = (0..n)
            .map(|i| (0..latency.ncols()).map(|j| latency[(i, j)] * theta.beta[j]).sum())
            .collect();
        let zg: Vec<f64> = (0..n)
            .map(|i| (0..incidence.ncols()).map(|j| incidence[(i, j)] * theta.gamma[j]).sum())
            .collect();
        let exb = xb.iter().map(|v| v.exp()).collect();
        Self { family, xb, exb, zg }
    }
}

/// Everything the variance code needs about one subject at one level of `H`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct SubjectState {
    /// `log G(a)` with `a = Lambda(h + xb) - zg`.
    pub log_g: f64,
    /// `G(a)`.
    pub g: f64,
    /// `Gbar(a)`.
    pub gbar: f64,
    /// `lambda_eps(h + xb)`.
    pub lambda: f64,
    /// `Psi = lambda * Gbar(a) = d log G(a) / dh`.
    pub psi: f64,
}

#[inline]
fn logistic_parts(a: f64) -> (f64, f64, f64) {
    // (log G(a), G(a), Gbar(a)) from one exp and one log1p
    let e = (-a.abs()).exp();
    let l1 = e.ln_1p();
    let log_g = -((-a).max(0.0) + l1);
    let (g, gbar) = if a >= 0.0 {
        (1.0 / (1.0 + e), e / (1.0 + e))
    } else {
        (e / (1.0 + e), 1.0 / (1.0 + e))
    };
    (log_g, g, gbar)
}

#[inline]
pub(crate) fn subject_state(family: Family, level: f64, xb: f64, zg: f64) -> SubjectState {
    if level == f64::NEG_INFINITY {
        let (log_g, g, gbar) = logistic_parts(-zg);
        return SubjectState { log_g, g, gbar, lambda: 0.0, psi: 0.0 };
    }
    let x = level + xb;
    let cum = family.cum_hazard_raw(x);
    if !cum.is_finite() {
        return SubjectState { log_g: 0.0, g: 1.0, gbar: 0.0, lambda: f64::INFINITY, psi: 0.0 };
    }
    let lambda = family.hazard_raw(x);
    let (log_g, g, gbar) = logistic_parts(cum - zg);
    let psi = if gbar == 0.0 { 0.0 } else { lambda * gbar };
    SubjectState { log_g, g, gbar, lambda, psi }
}

/// Hot path: `(log G(a), Psi)` for a finite level. `eh = exp(level)`.
#[inline]
fn log_g_psi(family: Family, level: f64, eh: f64, xb: f64, exb: f64, zg: f64) -> (f64, f64) {
    let (cum, lambda) = match family {
        Family::Ph => {
            let c = eh * exb;
            (c, c)
        }
        Family::Po => {
            let x = level + xb;
            let e = (-x.abs()).exp();
            let cum = x.max(0.0) + e.ln_1p();
            let lam = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
            (cum, lam)
        }
    };
    if !cum.is_finite() {
        return (0.0, 0.0);
    }
    let a = cum - zg;
    let e = (-a.abs()).exp();
    let log_g = -((-a).max(0.0) + e.ln_1p());
    let gbar = if a >= 0.0 { e / (1.0 + e) } else { 1.0 / (1.0 + e) };
    (log_g, if gbar == 0.0 { 0.0 } else { lambda * gbar })
}

struct Workspace {
    l: Vec<f64>,
    psi: Vec<f64>,
    stamp: Vec<usize>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            l: vec![0.0; n],
            psi: vec![0.0; n],
            stamp: vec![usize::MAX; n],
        }
    }
}

/// Evaluates `sum (L_i(h), Psi_i(h))` over a risk set, caching per subject.
#[inline]
fn eval_sum(pred: &Predictors, rs: &[u32], h: f64, ws: &mut Workspace) -> (f64, f64) {
    let eh = if pred.family == Family::Ph { h.exp() } else { 0.0 };
    let (mut sl, mut sp) = (0.0, 0.0);
    for &i in rs {
        let i = i as usize;
        let (l, p) = log_g_psi(pred.family, h, eh, pred.xb[i], pred.exb[i], pred.zg[i]);
        ws.l[i] = l;
        ws.psi[i] = p;
        sl += l;
        sp += p;
    }
    (sl, sp)
}

/// Solves for `(H_1, ..., H_K)`. `warm`, when given, seeds each step's
/// Newton iteration (typically the solution at a nearby `theta`).
pub(crate) fn solve_levels(
    grid: &EventGrid,
    pred: &Predictors,
    opts: &ProfileOptions,
    warm: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let k_total = grid.n_events();
    let mut ws = Workspace::new(pred.xb.len());
    let mut levels = Vec::with_capacity(k_total);
    let mut prev = f64::NEG_INFINITY;
    let mut saturated = false;

    for k in 1..=k_total {
        let rs = grid.risk_set(k);
        let dn = grid.dn[k - 1];
        if saturated {
            levels.push(f64::INFINITY);
            continue;
        }

        // L_i(H_{k-1}) and Psi_i(H_{k-1}), reusing values cached at level k-1
        let (mut base, mut dbase) = (0.0, 0.0);
        for &i in rs {
            let i = i as usize;
            if ws.stamp[i] != k - 1 {
                let s = subject_state(pred.family, prev, pred.xb[i], pred.zg[i]);
                ws.l[i] = s.log_g;
                ws.psi[i] = s.psi;
            }
            base += ws.l[i];
            dbase += ws.psi[i];
        }
        let sup = -base;
        if !(sup > dn) {
            match opts.tail {
                TailPolicy::Error => {
                    return Err(Error::TailDivergence {
                        time: grid.times[k - 1],
                        index: k,
                    })
                }
                TailPolicy::Saturate => {
                    saturated = true;
                    levels.push(f64::INFINITY);
                    continue;
                }
            }
        }

        let target = base + dn;
        let h = solve_step(pred, rs, prev, dbase, dn, target, warm.map(|w| w[k - 1]), opts, &mut ws)
            .map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("{msg} at event time {}", grid.times[k - 1]))
                }
                e => e,
            })?;
        for &i in rs {
            ws.stamp[i as usize] = k;
        }
        levels.push(h);
        prev = h;
    }
    Ok(levels)
}

#[allow(clippy::too_many_arguments)]
fn solve_step(
    pred: &Predictors,
    rs: &[u32],
    prev: f64,
    dprev: f64,
    dn: f64,
    target: f64,
    warm: Option<f64>,
    opts: &ProfileOptions,
    ws: &mut Workspace,
) -> Result<f64> {
    let ftol = 1e-13 * (1.0 + dn);
    let mut lo = prev;
    let mut hi = f64::INFINITY;
    let mut h = match warm {
        Some(w) if w.is_finite() && w > prev => w,
        _ if prev.is_finite() => {
            if dprev > 0.0 {
                prev + dn / dprev
            } else {
                prev + 1.0
            }
        }
        _ => 0.0,
    };
    let mut expansions = 0u32;
    for _ in 0..400 {
        let (sl, sp) = eval_sum(pred, rs, h, ws);
        let f = sl - target;
        if f.abs() <= ftol {
            return Ok(h);
        }
        if f > 0.0 {
            hi = h;
        } else {
            lo = h;
        }
        if sp > 0.0 && (f / sp).abs() <= 1e-3 * opts.tol * h.abs().max(1.0) {
            return Ok(h);
        }
        if hi.is_finite() && lo.is_finite() && hi - lo <= opts.tol {
            // bracket has collapsed; settle on its midpoint
            let mid = 0.5 * (lo + hi);
            eval_sum(pred, rs, mid, ws);
            return Ok(mid);
        }
        let newton = if sp > 0.0 { h - f / sp } else { f64::NAN };
        let inside = newton > lo && newton < hi;
        h = if inside && (lo.is_finite() || newton >= h - 2.0 * h.abs().max(1.0)) {
            newton
        } else if lo.is_finite() && hi.is_finite() {
            0.5 * (lo + hi)
        } else {
            expansions += 1;
            if expansions > opts.max_doublings {
                return Err(Error::Numeric("profile bracket expansion failed".into()));
            }
            if hi.is_infinite() {
                lo + 2.0 * (h - lo).max(1.0)
            } else {
                h - 2.0 * h.abs().max(1.0)
            }
        };
    }
    Err(Error::Numeric("profile step did not converge".into()))
}

/// Profile estimate `H(.; theta)` for the given latency covariates.
pub fn solve_profile_h(
    sample: &Sample,
    latency: &DMatrix<f64>,
    theta: &ParameterVector,
    family: Family,
    opts: &ProfileOptions,
) -> Result<StepFunction> {
    check_inputs(sample, latency, theta)?;
    let pred = Predictors::new(family, latency, &sample.z_matrix(), theta);
    let levels = solve_levels(sample.grid(), &pred, opts, None)?;
    Ok(StepFunction::from_parts_unchecked(sample.grid().times.clone(), levels))
}

pub(crate) fn check_inputs(sample: &Sample, latency: &DMatrix<f64>, theta: &ParameterVector) -> Result<()> {
    if latency.nrows() != sample.n() || latency.ncols() != sample.p() {
        return Err(Error::Domain(format!(
            "latency covariates are {}x{}, sample needs {}x{}",
            latency.nrows(),
            latency.ncols(),
            sample.n(),
            sample.p()
        )));
    }
    if latency.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("latency covariates must be finite".into()));
    }
    theta.check(sample.p(), sample.q())
}

/// Largest absolute imbalance of the summed martingale increments
/// `sum_i [dN_i(t) - R_i(t) dlog G(a_i(H(t)))]` over the event times.
///
/// Recomputed directly from the risk indicator, independent of the solver's
/// bookkeeping.
pub fn residual_balance(
    sample: &Sample,
    latency: &DMatrix<f64>,
    theta: &ParameterVector,
    h: &StepFunction,
    family: Family,
) -> Result<f64> {
    check_inputs(sample, latency, theta)?;
    if h.is_empty() {
        return Err(Error::NotEstimable);
    }
    let times = h.jump_times();
    let mut worst: f64 = 0.0;
    for (k, &t) in times.iter().enumerate() {
        let before = if k == 0 { f64::NEG_INFINITY } else { h.evaluate(times[k - 1]) };
        let after = h.evaluate(t);
        let mut total = 0.0;
        for (i, s) in sample.subjects().iter().enumerate() {
            if s.delta && s.y == t {
                total += 1.0;
            }
            if at_risk(s, t) {
                let w: Vec<f64> = latency.row(i).iter().copied().collect();
                let xb = dot(&w, &theta.beta);
                let zg = dot(&s.z, &theta.gamma);
                let l1 = subject_state(family, after, xb, zg).log_g;
                let l0 = subject_state(family, before, xb, zg).log_g;
                total -= l1 - l0;
            }
        }
        worst = worst.max(total.abs());
    }
    Ok(worst)
}
