mod common;

use twoscale_core::legendre::{build_legendre_table, LegendreTable, StarGrid, TruncationParams};
use twoscale_core::reduced::{
    dp_oracle, reduced_cost_samples, solve_reduced, solve_reduced_deterministic, DeterministicSettings, ReducedPolicy,
    ReducedSettings,
};
use twoscale_core::Result;

// Driver -z^2/2 has conjugate -alpha^2/2, so the reduced problem is
// min X_1 + int alpha^2/2 dt with dX = (-X - alpha) dt, X_0 = 1/2. The
// optimal control is alpha(t) = e^{-(1 - t)} and the value is
// e^{-1}/2 - (1 - e^{-2})/4.
const VALUE: f64 = -0.03222645860512566;

fn table() -> LegendreTable {
    let p = TruncationParams::new(1.0, 7.0, 1.0).unwrap();
    let grid = StarGrid::new(p.cone_radius(), 401).unwrap();
    let xs: Vec<f64> = (0..9).map(|i| -2.0 + 0.5 * i as f64).collect();
    let lam = |_: &[f64], z: &[f64]| -> Result<f64> { Ok(-0.5 * z[0] * z[0]) };
    build_legendre_table(&lam, &xs, 1, &p, 201, &grid).unwrap()
}

#[test]
fn frozen_value() {
    let e = (-1.0f64).exp();
    assert!((VALUE - (0.5 * e - (1.0 - e * e) / 4.0)).abs() < 1e-15);
}

#[test]
fn dp_oracle_matches_closed_form() {
    let model = common::linear_model(0.0, 0.0, -1.0, 0.5);
    let xs: Vec<f64> = (0..401).map(|i| -2.0 + 0.01 * i as f64).collect();
    let alphas: Vec<f64> = (0..81).map(|i| -2.0 + 0.05 * i as f64).collect();
    let v = dp_oracle(&model, &table(), 0.0, &xs, &alphas, 100).unwrap();
    assert!((v - VALUE).abs() < 0.01, "{v} against {VALUE}");
}

#[test]
fn deterministic_transcription_matches_closed_form() {
    let model = common::linear_model(0.0, 0.0, -1.0, 0.5);
    let sol = solve_reduced_deterministic(&model, &table(), &DeterministicSettings::default()).unwrap();
    assert!((sol.value - VALUE).abs() < 0.005, "{} against {VALUE}", sol.value);
    // the optimal control rises from e^{-1} to 1
    let first = sol.alpha[0][0];
    let last = sol.alpha[sol.alpha.len() - 1][0];
    assert!((first - (-1.0f64).exp()).abs() < 0.05, "alpha(0) = {first}");
    assert!((last - 1.0).abs() < 0.05, "alpha(1) = {last}");
}

#[test]
fn policy_search_matches_closed_form() {
    let model = common::linear_model(0.0, 0.0, -1.0, 0.5);
    let settings = ReducedSettings { blocks: 10, max_evals: 2000, ..Default::default() };
    let sol = solve_reduced(&model, &table(), 0.0, &settings).unwrap();
    assert!((sol.estimate.mean - VALUE).abs() < 0.01, "{} against {VALUE}", sol.estimate.mean);
    assert!(sol.trace.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn zero_control_cost_is_the_uncontrolled_terminal() {
    // alpha = 0 costs X_1 = e^{-1}/2 plus the conjugate at 0, which is 0
    let model = common::linear_model(0.0, 0.0, -1.0, 0.5);
    let policy = ReducedPolicy::zero(1, 4, 200, 2.0).unwrap();
    let c = reduced_cost_samples(&model, &table(), 0.0, &policy, 200, 3, 1).unwrap();
    for s in c.samples {
        assert!((s - 0.5 * (-1.0f64).exp()).abs() < 1e-9, "{s}");
    }
    assert_eq!(c.x_clamped, 0);
}
