mod common;

use proptest::prelude::*;
use twoscale_core::dynamics::{contraction_slope, replay, simulate_frozen_fast, simulate_pair, ConstantPolicy, TwoScaleParams};
use twoscale_core::presets::{load_preset, single_mode_ou};
use twoscale_core::spectral::ModeVector;

#[test]
fn linear_fast_flow_contracts_at_the_leading_rate() {
    // F = 0 and a shared noise: the gap between two runs follows the fast
    // semigroup exactly, so its log-slope along mode 1 is -mu / epsilon
    let model = load_preset("linear_toy").unwrap();
    let eps = 0.05;
    let params = TwoScaleParams::from_model(&model, eps, 0.1).unwrap();
    let mut q_alt = model.q0.clone();
    q_alt[0] += 1.0;
    let slope = contraction_slope(&model, &params, &ModeVector::new(q_alt), 5.0 * eps, 3, 0).unwrap();
    let target = -model.constants.mu / eps;
    assert!((slope - target).abs() <= 1e-6 * target.abs(), "slope {slope} against {target}");
}

#[test]
fn reaction_diffusion_contracts_at_least_at_mu() {
    let model = load_preset("reaction_diffusion").unwrap();
    let eps = 0.05;
    let params = TwoScaleParams::from_model(&model, eps, 0.1).unwrap();
    let mut q_alt = model.q0.clone();
    q_alt[0] += 1.0;
    let q_alt = ModeVector::new(q_alt);
    let slopes: Vec<f64> = (0..10)
        .map(|p| contraction_slope(&model, &params, &q_alt, 5.0 * eps, 5, p).unwrap())
        .collect();
    let mean = slopes.iter().sum::<f64>() / slopes.len() as f64;
    assert!(mean <= -0.9 * model.constants.mu / eps, "mean slope {mean}");
}

#[test]
fn ou_mode_reaches_its_stationary_variance() {
    // dq = -(pi^2 + m) q dt + g dW has stationary variance g^2 / (2 (pi^2 + m))
    let (m, g) = (1.0, 3.0);
    let model = single_mode_ou(m, g).unwrap();
    let exact = g * g / (2.0 * (std::f64::consts::PI.powi(2) + m));
    let x = ModeVector::new(vec![0.0]);
    let mut samples = Vec::new();
    for path in 0..40 {
        let tr = simulate_frozen_fast(&model, &x, None, None, 20.0, 0.01, 8, path).unwrap();
        // one sample every 0.5 time units, past a burn-in of 1
        samples.extend(tr.q.iter().skip(100).step_by(50).map(|q| q[0]));
    }
    let n = samples.len() as f64;
    let var = samples.iter().map(|q| q * q).sum::<f64>() / n;
    let se = exact * (2.0 / n).sqrt();
    assert!((var - exact).abs() < 4.0 * se, "variance {var} against {exact} (se {se})");
}

#[test]
fn zero_noise_slow_mode_decays_exactly() {
    let model = common::linear_model(0.0, 0.0, -1.5, 0.8);
    let params = TwoScaleParams::from_model(&model, 0.2, 0.0).unwrap();
    let path = simulate_pair(&model, &params, None, 1, 0).unwrap();
    for (t, x) in path.times.iter().zip(&path.x) {
        assert!((x[0] - 0.8 * (-1.5 * t).exp()).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn replay_is_bit_exact(seed in 0u64..1000, path in 0u64..100, eta in 0.0f64..0.5) {
        let model = load_preset("linear_toy").unwrap();
        let params = TwoScaleParams::from_model(&model, 0.1, eta).unwrap();
        let policy = ConstantPolicy(4);
        let a = simulate_pair(&model, &params, Some(&policy), seed, path).unwrap();
        let b = replay(&model, &a).unwrap();
        prop_assert_eq!(&a, &b);
        let c = simulate_pair(&model, &params, Some(&policy), seed, path).unwrap();
        prop_assert_eq!(a, c);
    }
}
