//! Independent oracles shared by the integration tests and the acceptance
//! target. Nothing here calls into the library's solvers except to obtain
//! the value under test.
#![allow(dead_code)]

use curesimex::rng::{stream, Domain};
use curesimex::sim::{generate_with_c, propose_population, CalibrationPool, GeneratorConfig};
use curesimex::{
    extrapolate_at, fit_extrapolant, perturb_covariates, residual_balance, run_simex,
    solve_profile_h, solve_theta, stacked_score, Extrapolant, Family, ParameterVector, ProfileOptions, Sample,
    ScoreOptions, SimexGrid, SimexOptions, SolverOptions, Subject,
};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

/// Outcome of one check: pass flag plus a one-line summary.
#[derive(Debug, Clone)]
pub struct Check {
    pub ok: bool,
    pub detail: String,
}

impl Check {
    fn new(ok: bool, detail: String) -> Self {
        Self { ok, detail }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- model functions written out from the definitions ----

/// `Lambda` of the transformation family.
pub fn big_lambda(f: Family, x: f64) -> f64 {
    match f {
        Family::Ph => x.exp(),
        Family::Po => {
            if x > 30.0 {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            }
        }
    }
}

/// `log G(a)`, `G` the logistic cdf.
pub fn log_g(a: f64) -> f64 {
    if a >= 0.0 {
        -(-a).exp().ln_1p()
    } else {
        a - a.exp().ln_1p()
    }
}

/// `log G(Lambda(h + xb) - zg)`, with the limits at `h = -inf, +inf`.
pub fn log_l(f: Family, h: f64, xb: f64, zg: f64) -> f64 {
    if h == f64::NEG_INFINITY {
        log_g(-zg)
    } else if h == f64::INFINITY {
        0.0
    } else {
        log_g(big_lambda(f, h + xb) - zg)
    }
}

// ---- small random samples ----

/// `n` subjects, at least one event and at most `max_events` distinct
/// event times; times on a 0.1 lattice so that ties occur.
pub fn small_sample<R: Rng>(rng: &mut R, n: usize, max_events: usize) -> Sample {
    loop {
        let subjects: Vec<Subject> = (0..n)
            .map(|_| {
                let y = (rng.random_range(1..=30) as f64) / 10.0;
                let a = if rng.random_bool(0.3) { 0.0 } else { (y * rng.random_range(0.0..0.9) * 10.0).floor() / 10.0 };
                let delta = rng.random_bool(0.6);
                let w: f64 = rng.sample(StandardNormal);
                let z: f64 = rng.sample(StandardNormal);
                Subject::new(y, a, delta, vec![w], vec![z])
            })
            .collect();
        let mut ev: Vec<f64> = subjects.iter().filter(|s| s.delta).map(|s| s.y).collect();
        ev.sort_by(f64::total_cmp);
        ev.dedup();
        if !ev.is_empty() && ev.len() <= max_events {
            return Sample::new(subjects).expect("valid sample");
        }
    }
}

/// Paper-design sample of size `n` with a fixed censoring bound.
pub fn design_sample(family: Family, n: usize, sigma: f64, c: f64, seed: u64) -> Sample {
    try_design_sample(family, n, sigma, c, seed).expect("generator")
}

/// As [`design_sample`]; fails when the draw has no events.
pub fn try_design_sample(family: Family, n: usize, sigma: f64, c: f64, seed: u64) -> curesimex::Result<Sample> {
    let mut cfg = GeneratorConfig::paper(family, 0.25, sigma, n);
    cfg.censoring_c = Some(c);
    let mut r = stream(seed, Domain::Generate, &[0]);
    Ok(generate_with_c(&cfg, c, &mut r)?.0)
}

// ---- profile recursion ----

/// Jump values by direct search on each step's balance equation: a
/// monotone function of the new level, bracketed and then narrowed by
/// repeated 11-point grids. `None` when some step has no finite root.
pub fn profile_by_grid(sample: &Sample, theta: &ParameterVector, family: Family) -> Option<Vec<f64>> {
    let subj = sample.subjects();
    let mut times: Vec<f64> = subj.iter().filter(|s| s.delta).map(|s| s.y).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut prev = f64::NEG_INFINITY;
    let mut out = Vec::with_capacity(times.len());
    for &t in &times {
        let dn = subj.iter().filter(|s| s.delta && s.y == t).count() as f64;
        let risk: Vec<(f64, f64)> = subj
            .iter()
            .filter(|s| s.a <= t && t <= s.y)
            .map(|s| (s.w[0] * theta.beta[0], s.z[0] * theta.gamma[0]))
            .collect();
        let f = |h: f64| -> f64 {
            risk.iter().map(|&(xb, zg)| log_l(family, h, xb, zg) - log_l(family, prev, xb, zg)).sum::<f64>() - dn
        };
        if f(f64::INFINITY) <= 1e-12 {
            return None;
        }
        let mut lo = if prev.is_finite() { prev } else { -60.0 };
        let mut hi = lo + 1.0;
        while f(hi) < 0.0 {
            hi = lo + 2.0 * (hi - lo);
            if hi > 1e6 {
                return None;
            }
        }
        for _ in 0..30 {
            let grid: Vec<f64> = (0..=10).map(|j| lo + (hi - lo) * j as f64 / 10.0).collect();
            let j = grid.iter().position(|&g| f(g) >= 0.0).unwrap_or(10).max(1);
            lo = grid[j - 1];
            hi = grid[j];
        }
        prev = 0.5 * (lo + hi);
        out.push(prev);
    }
    Some(out)
}

/// Profile recursion against the grid oracle on random samples with
/// `n <= 5` and at most three event times.
pub fn profile_oracle(samples: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst_jump: f64 = 0.0;
    let mut worst_balance: f64 = 0.0;
    let mut done = 0;
    let mut redrawn = 0;
    while done < samples {
        let n = r.random_range(2..=5);
        let sample = small_sample(&mut r, n, 3);
        let theta = ParameterVector::new(vec![r.random_range(-1.5..1.5)], vec![r.random_range(-1.5..1.5)]);
        let family = if done.is_multiple_of(2) { Family::Ph } else { Family::Po };
        let Some(oracle) = profile_by_grid(&sample, &theta, family) else {
            redrawn += 1;
            continue;
        };
        let w = sample.w_matrix();
        let h = solve_profile_h(&sample, &w, &theta, family, &ProfileOptions::default()).expect("profile");
        for (a, b) in h.values().iter().zip(&oracle) {
            worst_jump = worst_jump.max((a - b).abs());
        }
        let bal = residual_balance(&sample, &w, &theta, &h, family).expect("balance");
        worst_balance = worst_balance.max(bal);
        done += 1;
    }
    Check::new(
        worst_jump <= 1e-3 && worst_balance <= 1e-8,
        format!(
            "{samples} samples ({redrawn} redrawn without a finite root): max |H - oracle| = {worst_jump:.2e}, max balance = {worst_balance:.2e}"
        ),
    )
}

// ---- theta solver ----

fn sup_score(sample: &Sample, w: &DMatrix<f64>, family: Family, b: f64, g: f64) -> f64 {
    let theta = ParameterVector::new(vec![b], vec![g]);
    match stacked_score(&theta, sample, w, family, &ScoreOptions::default()) {
        Ok(u) => u.amax(),
        Err(_) => f64::INFINITY,
    }
}

fn score_pair(sample: &Sample, w: &DMatrix<f64>, family: Family, b: f64, g: f64) -> Option<(f64, f64)> {
    let theta = ParameterVector::new(vec![b], vec![g]);
    let u = stacked_score(&theta, sample, w, family, &ScoreOptions::default()).ok()?;
    (u[0].is_finite() && u[1].is_finite()).then_some((u[0], u[1]))
}

/// Sign change of `f` inside `[lo, hi]`, narrowed by 40 rounds of 11-point grids.
fn refine_sign_change(f: &dyn Fn(f64) -> Option<f64>, mut lo: f64, mut hi: f64) -> Option<f64> {
    let s_lo = f(lo)?.signum();
    for _ in 0..40 {
        let grid: Vec<f64> = (0..=10).map(|j| lo + (hi - lo) * j as f64 / 10.0).collect();
        let mut moved = false;
        for j in 1..=10 {
            let v = f(grid[j])?;
            if v.signum() != s_lo || v == 0.0 {
                lo = grid[j - 1];
                hi = grid[j];
                moved = true;
                break;
            }
        }
        if !moved {
            return None;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Roots of `f = (f1, f2)` in `[-5.9, 5.9]^2` by nested grid search over
/// `(x, y)`: on a 0.05 lattice in `y`, every sign change of `f1` along a 0.1
/// lattice in `x` is refined to a branch `x(y)`; sign changes of `f2` along
/// each branch are then refined in `y`, re-solving `x` inside the branch
/// bracket at every trial point.
fn nested_roots(f: &dyn Fn(f64, f64) -> Option<(f64, f64)>) -> Vec<(f64, f64)> {
    let f1 = |x: f64, y: f64| f(x, y).map(|u| u.0);
    let f2 = |x: f64, y: f64| f(x, y).map(|u| u.1);
    let xs: Vec<f64> = (0..=120).map(|i| -6.0 + 0.1 * i as f64).collect();
    let branch = |y: f64| -> Vec<f64> {
        let vals: Vec<Option<f64>> = xs.iter().map(|&x| f1(x, y)).collect();
        let mut out = Vec::new();
        for i in 0..xs.len() - 1 {
            if let (Some(a), Some(b)) = (vals[i], vals[i + 1]) {
                if a.signum() != b.signum() {
                    if let Some(x) = refine_sign_change(&|x| f1(x, y), xs[i], xs[i + 1]) {
                        out.push(x);
                    }
                }
            }
        }
        out
    };
    let ys: Vec<f64> = (0..=240).map(|i| -6.0 + 0.05 * i as f64).collect();
    let branches: Vec<Vec<f64>> = ys.iter().map(|&y| branch(y)).collect();
    let mut roots = Vec::new();
    for i in 0..ys.len() - 1 {
        for &x0 in &branches[i] {
            for &x1 in &branches[i + 1] {
                if (x0 - x1).abs() > 0.3 {
                    continue;
                }
                let (y0, y1) = (ys[i], ys[i + 1]);
                let (Some(s0), Some(s1)) = (f2(x0, y0), f2(x1, y1)) else { continue };
                if s0.signum() == s1.signum() {
                    continue;
                }
                let (lo, hi) = (x0.min(x1) - 0.15, x0.max(x1) + 0.15);
                let along = |y: f64| -> Option<f64> { f2(refine_sign_change(&|x| f1(x, y), lo, hi)?, y) };
                let Some(y) = refine_sign_change(&along, y0, y1) else { continue };
                if let Some(x) = refine_sign_change(&|x| f1(x, y), lo, hi) {
                    roots.push((x, y));
                }
            }
        }
    }
    roots
}

/// Roots of `U` found by [`nested_roots`] in both orientations, kept when
/// `max |U| <= 1e-6`.
pub fn roots_by_grid(sample: &Sample, family: Family) -> Vec<(f64, f64)> {
    let w = sample.w_matrix();
    let u = |b: f64, g: f64| score_pair(sample, &w, family, b, g);
    let mut found = nested_roots(&|b, g| u(b, g));
    found.extend(nested_roots(&|g, b| u(b, g)).into_iter().map(|(g, b)| (b, g)));
    let mut roots: Vec<(f64, f64)> = Vec::new();
    for (b, g) in found {
        let ok = u(b, g).is_some_and(|v| v.0.abs().max(v.1.abs()) <= 1e-6);
        let fresh = roots.iter().all(|r| (r.0 - b).abs().max((r.1 - g).abs()) > 1e-3);
        if ok && fresh && b.abs() <= 5.9 && g.abs() <= 5.9 {
            roots.push((b, g));
        }
    }
    roots
}

/// Newton solver against the grid oracle on `n = 6` design samples whose
/// score has a root in the search box. Small samples can have several
/// roots; the solver must land on one of them.
pub fn solver_oracle(samples: usize, seed: u64) -> Check {
    let mut worst_dist: f64 = 0.0;
    let mut worst_score: f64 = 0.0;
    let mut done = 0;
    let mut skipped = 0;
    let mut multi = 0;
    let mut draw = 0u64;
    while done < samples {
        draw += 1;
        let family = if draw.is_multiple_of(2) { Family::Ph } else { Family::Po };
        let Ok(sample) = try_design_sample(family, 6, 0.0, 4.0, seed.wrapping_add(draw)) else {
            skipped += 1;
            continue;
        };
        let roots = roots_by_grid(&sample, family);
        if roots.is_empty() {
            skipped += 1;
            continue;
        }
        if roots.len() > 1 {
            multi += 1;
        }
        let fit = solve_theta(&sample, &sample.w_matrix(), family, &ParameterVector::zeros(1, 1), &SolverOptions::default());
        match fit {
            Ok(f) => {
                let (b, g) = (f.theta_hat.beta[0], f.theta_hat.gamma[0]);
                let d = roots.iter().map(|r| (r.0 - b).abs().max((r.1 - g).abs())).fold(f64::INFINITY, f64::min);
                worst_dist = worst_dist.max(d);
                worst_score = worst_score.max(f.score_norm);
            }
            Err(_) => {
                worst_dist = f64::INFINITY;
                worst_score = f64::INFINITY;
            }
        }
        done += 1;
    }
    Check::new(
        worst_dist <= 1e-2 && worst_score <= 1e-8,
        format!(
            "{samples} samples ({skipped} draws without a root in the box, {multi} with several roots): max distance to a grid root = {worst_dist:.2e}, max |U| = {worst_score:.2e}"
        ),
    )
}

// ---- SIMEX ----

/// With no added noise every pseudo-sample equals the data, so the SIMEX
/// estimate must equal the naive one.
pub fn degenerate_noise(datasets: usize, seed: u64) -> Check {
    let grid = SimexGrid::uniform(2.0, 0.25, 4, DMatrix::zeros(1, 1)).expect("grid");
    let opts = SimexOptions::default();
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut skipped = 0;
    let mut draw = 0u64;
    while done < datasets {
        draw += 1;
        let family = if draw.is_multiple_of(2) { Family::Ph } else { Family::Po };
        let sample = design_sample(family, 150, 0.5, 4.0, seed.wrapping_add(draw));
        match run_simex(&sample, family, &grid, &opts, draw) {
            Ok(res) if res.naive.converged => {
                let a = res.theta_simex.to_vector();
                let b = res.naive.theta_hat.to_vector();
                worst = worst.max((a - b).amax());
                done += 1;
            }
            _ => skipped += 1,
        }
    }
    Check::new(
        worst <= 1e-8,
        format!("{datasets} datasets ({skipped} with a non-convergent naive fit skipped): max |simex - naive| = {worst:.2e}"),
    )
}

/// Exact quadratic data: coefficients and the value at -1.
pub fn extrapolation_exactness(trials: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let zetas: Vec<f64> = (0..=8).map(|m| 0.25 * m as f64).collect();
    let mut worst_coef: f64 = 0.0;
    let mut worst_pred: f64 = 0.0;
    for _ in 0..trials {
        let gam: Vec<[f64; 3]> = (0..2)
            .map(|_| [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)])
            .collect();
        let points: Vec<(f64, Vec<f64>)> =
            zetas.iter().map(|&z| (z, gam.iter().map(|g| g[0] + g[1] * z + g[2] * z * z).collect())).collect();
        let model = fit_extrapolant(&points, Extrapolant::Quadratic).expect("fit");
        for (c, g) in model.coefficients.iter().zip(&gam) {
            for k in 0..3 {
                worst_coef = worst_coef.max((c[k] - g[k]).abs());
            }
        }
        let at = extrapolate_at(&model, -1.0);
        let omega = curesimex::simex::extrapolation_weights(&zetas, Extrapolant::Quadratic, -1.0).expect("weights");
        for (j, g) in gam.iter().enumerate() {
            let exact = g[0] - g[1] + g[2];
            let contracted = model.coefficients[j][0] - model.coefficients[j][1] + model.coefficients[j][2];
            let weighted: f64 = points.iter().zip(omega.iter()).map(|(p, w)| w * p.1[j]).sum();
            worst_pred = worst_pred.max((at[j] - exact).abs()).max((at[j] - contracted).abs()).max((weighted - exact).abs());
        }
    }
    Check::new(
        worst_coef <= 1e-10 && worst_pred <= 1e-10,
        format!("{trials} quadratics: max coefficient error {worst_coef:.2e}, max error at -1 {worst_pred:.2e}"),
    )
}

/// Empirical variance of `W(b, zeta) - W` against `zeta * sigma`.
pub fn perturbation_law(b: usize, seed: u64) -> Check {
    let sigma = 0.5;
    let n = 200;
    let mut r = rng(seed);
    let w = DMatrix::from_fn(n, 1, |_, _| r.sample::<f64, _>(StandardNormal));
    let s = DMatrix::from_element(1, 1, sigma);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for zeta in [0.5, 1.0, 2.0] {
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..b {
            let wb = perturb_covariates(&w, zeta, &s, &mut r).expect("perturb");
            for i in 0..n {
                let d = wb[(i, 0)] - w[(i, 0)];
                sum += d;
                sum2 += d * d;
            }
        }
        let m = (n * b) as f64;
        let var = (sum2 - sum * sum / m) / (m - 1.0);
        let rel = (var / (zeta * sigma) - 1.0).abs();
        worst = worst.max(rel);
        parts.push(format!("zeta={zeta}: {var:.4} vs {:.4}", zeta * sigma));
    }
    Check::new(worst <= 0.05, format!("B={b}: {} (max rel. error {:.2}%)", parts.join(", "), 100.0 * worst))
}

// ---- generator ----

/// Covariate covariance, calibrated censoring rate and cure consistency
/// over `draws` recruited subjects.
pub fn generator_fidelity(draws: usize, seed: u64) -> Check {
    let mut cfg = GeneratorConfig::paper(Family::Ph, 0.25, 0.5, draws);
    cfg.seed = seed;
    let pool = CalibrationPool::new(&cfg, 100_000, seed).expect("pool");
    let c = curesimex::sim::generate::calibrate_on(&pool, 0.25).expect("calibration");
    let mut r = stream(seed ^ 0x5eed, Domain::Generate, &[1]);
    let (sample, latent) = generate_with_c(&cfg, c, &mut r).expect("generate");
    let mut pr = stream(seed ^ 0x5eed, Domain::Generate, &[2]);
    let pop = propose_population(&cfg, draws, &mut pr).expect("proposals");
    let m = pop.len() as f64;
    let mx = pop.iter().map(|d| d.x).sum::<f64>() / m;
    let mz = pop.iter().map(|d| d.z).sum::<f64>() / m;
    let cov = pop.iter().map(|d| (d.x - mx) * (d.z - mz)).sum::<f64>() / (m - 1.0);
    let var_x = pop.iter().map(|d| (d.x - mx).powi(2)).sum::<f64>() / (m - 1.0);
    let susceptible: Vec<_> = sample.subjects().iter().zip(&latent).filter(|(_, l)| l.pi).collect();
    let rate = susceptible.iter().filter(|(s, _)| !s.delta).count() as f64 / susceptible.len() as f64;
    let cure_ok = sample.subjects().iter().zip(&latent).all(|(s, l)| !s.delta || l.pi);
    let ok = (cov - 0.7).abs() <= 0.15 && (var_x / 4.0 - 1.0).abs() <= 0.05 && (rate - 0.25).abs() <= 0.01 && cure_ok;
    Check::new(
        ok,
        format!(
            "{draws} draws: cov(X*, Z*) = {cov:.3}, var(X*) = {var_x:.3}; recruited censoring {:.2}% (target 25%), delta=1 implies pi=1: {cure_ok}",
            100.0 * rate
        ),
    )
}
