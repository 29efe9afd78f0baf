use std::f64::consts::PI;

use twoscale_core::ergodic::{estimate_lambda, grid_vi, ErgodicSettings, ErgodicSolver};
use twoscale_core::presets::{load_preset, single_mode_ou, single_mode_reaction_diffusion};
use twoscale_core::spectral::ModeVector;

/// `E[min(q^2, 1)]` for `q ~ N(0, var)`, Simpson on `[-10 sd, 10 sd]`.
fn capped_square(var: f64) -> f64 {
    let n = 20_000;
    let a = -10.0 * var.sqrt();
    let h = -2.0 * a / n as f64;
    let f = |q: f64| (q * q).min(1.0) * (-q * q / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
    let mut s = f(a) + f(-a);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn capped_square_frozen_value() {
    // var (1 - P - 2 a phi(a)) + P with a = 1 / sd and P = P(|q| > 1),
    // at var = 9 / (2 (pi^2 + 1))
    let v = capped_square(9.0 / (2.0 * (PI * PI + 1.0)));
    // Simpson loses O(h^2) at the kink |q| = 1
    assert!((v - 0.3309659336163237).abs() < 1e-7, "{v}");
}

#[test]
fn ou_cesaro_matches_quadrature() {
    let (m, g) = (1.0, 3.0);
    let model = single_mode_ou(m, g).unwrap();
    let exact = capped_square(g * g / (2.0 * (PI * PI + m)));
    let est = estimate_lambda(&model, &ModeVector::new(vec![0.0]), &[0.0], &ErgodicSettings::default()).unwrap();
    assert!((est.mean - exact).abs() <= 3.0 * est.stderr, "{} ± {} against {exact}", est.mean, est.stderr);
}

#[test]
fn ou_value_iteration_matches_quadrature() {
    let (m, g) = (1.0, 3.0);
    let model = single_mode_ou(m, g).unwrap();
    let exact = capped_square(g * g / (2.0 * (PI * PI + m)));
    let vi = grid_vi(&model, &[0.0], &[0.0], 201).unwrap();
    assert!((vi - exact).abs() < 0.01, "{vi} against {exact}");
}

#[test]
fn linear_toy_matches_closed_form() {
    // tanh q1 averages to zero under the symmetric stationary law
    let model = load_preset("linear_toy").unwrap();
    let (beta, c_u, c_x) = (0.5, 0.2, 0.3);
    let settings = ErgodicSettings::default();
    for (x1, z) in [(0.0, [0.0, 0.0]), (1.0, [1.0, -0.3]), (-2.0, [-2.0, 2.5])] {
        let x = ModeVector::new(vec![x1, 0.0]);
        let est = estimate_lambda(&model, &x, &z, &settings).unwrap();
        let exact = c_x * f64::tanh(x1) + z.iter().map(|zi| (c_u - beta * zi.abs()).min(0.0)).sum::<f64>();
        assert!(
            (est.mean - exact).abs() <= 3.0 * est.stderr + 0.01,
            "({x1}, {z:?}): {} ± {} against {exact}",
            est.mean,
            est.stderr
        );
    }
}

#[test]
fn single_mode_cesaro_matches_value_iteration() {
    let model = single_mode_reaction_diffusion().unwrap();
    let settings = ErgodicSettings::default();
    let vi_settings = ErgodicSettings { solver: ErgodicSolver::GridVi, ..settings.clone() };
    for (x1, z) in [(0.0, 0.0), (1.0, 1.0), (-1.0, -1.5)] {
        let x = ModeVector::new(vec![x1]);
        let mc = estimate_lambda(&model, &x, &[z], &settings).unwrap();
        let vi = estimate_lambda(&model, &x, &[z], &vi_settings).unwrap();
        assert!((mc.mean - vi.mean).abs() <= 3.0 * mc.stderr + 0.02, "({x1}, {z}): {} against {}", mc.mean, vi.mean);
    }
}

#[test]
fn lambda_is_bounded_by_m_plus_m_abs_z() {
    let model = load_preset("reaction_diffusion").unwrap();
    let m = model.constants.m;
    let mut x = vec![0.0; model.n_slow()];
    x[0] = 0.5;
    let x = ModeVector::new(x);
    let settings = ErgodicSettings { n_paths: 32, ..Default::default() };
    for z in [-3.0, 0.0, 2.0] {
        let est = estimate_lambda(&model, &x, &[z], &settings).unwrap();
        assert!(est.mean.abs() <= m * (1.0 + f64::abs(z)) + 3.0 * est.stderr, "z = {z}: {}", est.mean);
    }
}
