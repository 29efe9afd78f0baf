use proptest::prelude::*;
use twoscale_core::legendre::{
    build_legendre_table, choose_kappa, fenchel_recover, legendre_star, tilde_lambda, StarGrid, TruncationParams, NEG_INF,
};
use twoscale_core::presets::single_mode_ou;
use twoscale_core::Result;

/// Concave driver `x/5 - |z|^2/2` for `|z| <= 1` and `x/5 - |z| + 1/2`
/// beyond, within `1 + |z|` in size for `|x| <= 2`.
fn huber(x: &[f64], z: &[f64]) -> Result<f64> {
    let r = z.iter().map(|c| c * c).sum::<f64>().sqrt();
    let h = if r <= 1.0 { 0.5 * r * r } else { r - 0.5 };
    Ok(0.2 * x[0] - h)
}

fn params() -> TruncationParams {
    // M = 1, kappa = 7, a = 1: identity radius 2, cone radius 8
    TruncationParams::new(1.0, 7.0, 1.0).unwrap()
}

#[test]
fn choose_kappa_frozen_values() {
    // M = 1: a = max(1.5 * 0.2, 0.1) = 0.3, kappa = 1 + 3 * 2 * 0.3
    let model = single_mode_ou(1.0, 1.0).unwrap();
    let p = choose_kappa(&model, 0.2).unwrap();
    assert!((p.a - 0.3).abs() < 1e-12);
    assert!((p.kappa - 2.8).abs() < 1e-12);
    let floor = choose_kappa(&model, 0.0).unwrap();
    assert!((floor.a - 0.1).abs() < 1e-12);
    assert!((floor.kappa - 1.6).abs() < 1e-12);
}

#[test]
fn truncation_radii() {
    let p = params();
    assert_eq!(p.identity_radius(), 2.0);
    assert_eq!(p.cone_radius(), 8.0);
    assert_eq!(p.alpha_radius(), 2.0);
    assert!(TruncationParams::new(1.0, 0.5, 0.1).is_err());
    assert!(TruncationParams::new(1.0, 3.0, 1.0).is_err());
}

#[test]
fn huber_conjugate_closed_form() {
    // for |alpha| <= 1 the infimum of -z alpha - huber(z) sits at z = alpha
    let p = params();
    let grid = StarGrid::new(p.cone_radius(), 401).unwrap();
    for x in [-1.0, 0.0, 0.7] {
        for alpha in [-1.0, -0.68, 0.0, 0.52, 0.96] {
            let tilde = |z: &[f64]| tilde_lambda(&huber, &p, &[x], z);
            let v = legendre_star(tilde, p.m, &[alpha], &grid).unwrap();
            let exact = -0.2 * x - 0.5 * alpha * alpha;
            assert!((v - exact).abs() < 1e-3, "x {x}, alpha {alpha}: {v} against {exact}");
        }
    }
    let tilde = |z: &[f64]| tilde_lambda(&huber, &p, &[0.0], z);
    assert_eq!(legendre_star(tilde, p.m, &[2.01], &grid).unwrap(), NEG_INF);
}

#[test]
fn huber_round_trip_recovers_the_driver() {
    let p = params();
    let grid = StarGrid::new(p.cone_radius(), 201).unwrap();
    let xs = [-1.0, 0.0, 1.0];
    let table = build_legendre_table(&huber, &xs, 1, &p, 201, &grid).unwrap();
    for x in xs {
        for z in [-1.5, -0.4, 0.0, 0.9, 1.8] {
            let back = fenchel_recover(&table, x, &[z]).unwrap();
            let exact = huber(&[x], &[z]).unwrap();
            assert!((back - exact).abs() < 0.01, "x {x}, z {z}: {back} against {exact}");
        }
    }
}

#[test]
fn two_dim_conjugate_is_radial() {
    let p = params();
    let grid = StarGrid::new(p.cone_radius(), 81).unwrap();
    let tilde = |z: &[f64]| tilde_lambda(&huber, &p, &[0.0], z);
    let a = legendre_star(tilde, p.m, &[1.0, 0.0], &grid).unwrap();
    let b = legendre_star(tilde, p.m, &[0.0, 1.0], &grid).unwrap();
    assert!((a - b).abs() < 1e-12);
    assert!((a + 0.5).abs() < 0.02, "{a}");
}

proptest! {
    #[test]
    fn truncation_cases(z in -20.0f64..20.0, x in -2.0f64..2.0, kappa in 3.2f64..10.0) {
        let p = TruncationParams::new(1.0, kappa, 0.5).unwrap();
        let lam = |x: &[f64], z: &[f64]| -> Result<f64> { Ok(x[0].sin() - z[0].abs() * 0.9) };
        let t = tilde_lambda(&lam, &p, &[x], &[z]).unwrap();
        let l = lam(&[x], &[z]).unwrap();
        let cone = kappa - 2.0 * z.abs();
        prop_assert!(t <= l + 1e-12);
        prop_assert!(t <= cone + 1e-12);
        if z.abs() <= p.identity_radius() {
            prop_assert_eq!(t, l);
        }
        if z.abs() >= p.cone_radius() {
            prop_assert_eq!(t, cone);
        }
    }

    #[test]
    fn conjugate_is_concave_in_alpha(a1 in -2.0f64..2.0, a2 in -2.0f64..2.0, w in 0.0f64..1.0) {
        let p = params();
        let grid = StarGrid::new(p.cone_radius(), 161).unwrap();
        let tilde = |z: &[f64]| tilde_lambda(&huber, &p, &[0.3], z);
        let s = |a: f64| legendre_star(tilde, p.m, &[a], &grid).unwrap();
        prop_assert!(s(w * a1 + (1.0 - w) * a2) >= w * s(a1) + (1.0 - w) * s(a2) - 1e-9);
    }
}
