mod common;

use curesimex::{run_simex, Family, SimexGrid, SimexOptions};
use nalgebra::DMatrix;

#[test]
fn zero_noise_reproduces_naive_fit() {
    let c = common::degenerate_noise(20, 99);
    assert!(c.ok, "{}", c.detail);
}

#[test]
fn quadratic_grids_are_recovered_exactly() {
    let c = common::extrapolation_exactness(50, 3);
    assert!(c.ok, "{}", c.detail);
}

#[test]
fn perturbation_variance_scales_with_zeta() {
    let c = common::perturbation_law(2000, 12);
    assert!(c.ok, "{}", c.detail);
}

#[test]
fn simex_is_reproducible_from_its_seed() {
    let sample = common::design_sample(Family::Po, 120, 0.5, 4.0, 31);
    let grid = SimexGrid::uniform(2.0, 0.5, 5, DMatrix::from_element(1, 1, 0.5)).unwrap();
    let a = run_simex(&sample, Family::Po, &grid, &SimexOptions::default(), 8).unwrap();
    let b = run_simex(&sample, Family::Po, &grid, &SimexOptions::default(), 8).unwrap();
    assert_eq!(a.theta_simex, b.theta_simex);
    let c = run_simex(&sample, Family::Po, &grid, &SimexOptions::default(), 9).unwrap();
    assert_ne!(a.theta_simex, c.theta_simex);
}

#[test]
fn averaged_estimates_attenuate_with_zeta() {
    // Added noise pulls the latency coefficient toward zero on average.
    let sample = common::design_sample(Family::Ph, 400, 0.5, 4.0, 5);
    let grid = SimexGrid::uniform(2.0, 1.0, 20, DMatrix::from_element(1, 1, 0.5)).unwrap();
    let res = run_simex(&sample, Family::Ph, &grid, &SimexOptions::default(), 1).unwrap();
    let b0 = res.theta_by_zeta[0].as_ref().unwrap().beta[0];
    let b2 = res.theta_by_zeta[2].as_ref().unwrap().beta[0];
    assert!(b2.abs() < b0.abs(), "beta at zeta=0: {b0}, at zeta=2: {b2}");
}
