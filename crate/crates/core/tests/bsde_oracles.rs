mod common;

use twoscale_core::bsde::{solve_full_bsde, solve_limit_with, value_by_policy, BsdeSettings};
use twoscale_core::dynamics::{ConstantPolicy, TwoScaleParams};
use twoscale_core::presets::load_preset;

// one control, running cost c, terminal cost X_1 with dX = -X dt + noise:
// the value is c + e^{-1} x0 for every epsilon and eta
const COST: f64 = 0.3;
const X0: f64 = 0.5;

fn exact() -> f64 {
    COST + (-1.0f64).exp() * X0
}

fn settings() -> BsdeSettings {
    BsdeSettings { n_paths: 1000, ..Default::default() }
}

#[test]
fn full_bsde_on_a_linear_uncontrolled_model() {
    let model = common::linear_model(COST, 0.4, -1.0, X0);
    let sol = solve_full_bsde(&model, 0.2, 0.3, &settings()).unwrap();
    assert!(sol.terminal_exact);
    assert!(
        (sol.y0.mean - exact()).abs() <= 3.0 * sol.y0.stderr + 1e-3,
        "{} ± {} against {}",
        sol.y0.mean,
        sol.y0.stderr,
        exact()
    );
}

#[test]
fn limit_bsde_with_a_constant_driver() {
    let model = common::linear_model(COST, 0.4, -1.0, X0);
    let sol = solve_limit_with(&model, 0.2, &settings(), |_, _| Ok(COST)).unwrap();
    assert!(sol.terminal_exact);
    assert!((sol.y0.mean - exact()).abs() <= 3.0 * sol.y0.stderr + 1e-3, "{}", sol.y0.mean);
}

#[test]
fn policy_value_matches_the_closed_form() {
    let model = common::linear_model(COST, 0.4, -1.0, X0);
    let params = TwoScaleParams::from_model(&model, 0.2, 0.3).unwrap();
    let v = value_by_policy(&model, &params, &ConstantPolicy(0), 4000, 5).unwrap();
    assert!((v.mean - exact()).abs() <= 3.0 * v.stderr + 1e-3, "{} ± {}", v.mean, v.stderr);
}

#[test]
fn bsde_is_below_every_constant_policy() {
    let model = load_preset("linear_toy").unwrap();
    let (eps, eta) = (0.2, 0.2);
    let sol = solve_full_bsde(&model, eps, eta, &settings()).unwrap();
    let params = TwoScaleParams::from_model(&model, eps, eta).unwrap();
    for u in 0..model.controls.len() {
        let v = value_by_policy(&model, &params, &ConstantPolicy(u), 1000, 9).unwrap();
        let se = sol.y0.combined_stderr(&v);
        assert!(v.mean >= sol.y0.mean - 3.0 * se, "control {u}: {} below {}", v.mean, sol.y0.mean);
    }
}

#[test]
fn solutions_are_seed_reproducible() {
    let model = common::linear_model(COST, 0.4, -1.0, X0);
    let a = solve_full_bsde(&model, 0.5, 0.2, &settings()).unwrap();
    let b = solve_full_bsde(&model, 0.5, 0.2, &settings()).unwrap();
    assert_eq!(a.y0, b.y0);
    assert_eq!(a.y, b.y);
}

#[test]
fn driver_quantiles_bound_the_containment() {
    let model = load_preset("linear_toy").unwrap();
    let sol = solve_full_bsde(&model, 0.2, 0.2, &settings()).unwrap();
    let max = sol.driver_z_norms.iter().cloned().fold(0.0, f64::max);
    assert_eq!(sol.driver_z_quantile(1.0), max);
    for q in [0.5, 0.9, 0.99] {
        assert!(sol.containment(sol.driver_z_quantile(q)) >= q);
    }
    assert!(sol.driver_z_quantile(0.5) <= sol.driver_z_quantile(0.99));
}
