mod common;

#[test]
fn newton_matches_grid_search_on_six_subjects() {
    let c = common::solver_oracle(20, 515);
    assert!(c.ok, "{}", c.detail);
}
