use approx::assert_relative_eq;
use proptest::prelude::*;
use twoscale_core::spectral::{DiagonalSemigroup, ModeStep, ModeVector, NoiseSpec, NoiseStream, OperatorLabel, SineTransform};

#[test]
fn mode_step_frozen_values() {
    // lam = -2, dt = 0.1
    let s = ModeStep::new(-2.0, 0.1);
    assert_relative_eq!(s.decay, 0.8187307530779818, epsilon = 1e-15);
    assert_relative_eq!(s.drift_weight, 0.09063462346100908, epsilon = 1e-15);
    assert_relative_eq!(s.noise_factor, 0.9078545505260751, epsilon = 1e-14);
}

#[test]
fn laplacian_eigenvalues() {
    let op = DiagonalSemigroup::laplacian(3, 0.5, 1.0, OperatorLabel::B).unwrap();
    let pi2 = std::f64::consts::PI.powi(2);
    for (k, lam) in op.eigenvalues.iter().enumerate() {
        let k = (k + 1) as f64;
        assert_relative_eq!(*lam, -(0.5 * pi2 * k * k + 1.0), epsilon = 1e-12);
    }
    assert_relative_eq!(op.max_eigenvalue(), -(0.5 * pi2 + 1.0), epsilon = 1e-12);
}

#[test]
fn increments_have_variance_dt() {
    let spec = NoiseSpec::new(1, 9, NoiseStream::W2);
    let dt = 0.01;
    let n = 20_000;
    let xs: Vec<f64> = (0..n).map(|s| spec.increment(0, s, dt).unwrap()[0]).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    // the sample variance has relative sd sqrt(2/n) = 1%
    assert!((var / dt - 1.0).abs() < 0.05, "variance ratio {}", var / dt);
    assert!(mean.abs() < 5.0 * (dt / n as f64).sqrt());
}

#[test]
fn streams_are_independent_keys() {
    let a = NoiseSpec::new(2, 1, NoiseStream::W1).increment(3, 7, 0.1).unwrap();
    let b = NoiseSpec::new(2, 1, NoiseStream::W2).increment(3, 7, 0.1).unwrap();
    let c = NoiseSpec::new(2, 1, NoiseStream::W1).increment(4, 7, 0.1).unwrap();
    assert_ne!(a, b);
    assert_ne!(a, c);
    assert_eq!(a, NoiseSpec::new(2, 1, NoiseStream::W1).increment(3, 7, 0.1).unwrap());
}

proptest! {
    #[test]
    fn semigroup_composes(
        eig in proptest::collection::vec(-200.0f64..-0.1, 1..8),
        s in 0.0f64..1.0,
        t in 0.0f64..1.0,
        seed in proptest::collection::vec(-1.0f64..1.0, 8),
    ) {
        let op = DiagonalSemigroup::new(eig.clone(), OperatorLabel::A).unwrap();
        let v = ModeVector::new(seed[..eig.len()].to_vec());
        let two = op.apply(s, &op.apply(t, &v).unwrap()).unwrap();
        let one = op.apply(s + t, &v).unwrap();
        for (a, b) in two.iter().zip(one.iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn semigroup_contracts(eig in proptest::collection::vec(-50.0f64..-0.1, 1..8), t in 0.0f64..2.0) {
        let op = DiagonalSemigroup::new(eig.clone(), OperatorLabel::A).unwrap();
        let v = ModeVector::new(vec![1.0; eig.len()]);
        let out = op.apply(t, &v).unwrap();
        let bound = (op.max_eigenvalue() * t).exp() * v.norm();
        prop_assert!(out.norm() <= bound * (1.0 + 1e-12));
    }

    #[test]
    fn sine_transform_round_trips(amps in proptest::collection::vec(-2.0f64..2.0, 1..10), extra in 0usize..20) {
        let n_modes = amps.len();
        let tr = SineTransform::new(n_modes + extra, n_modes).unwrap();
        let values = tr.inverse(&amps).unwrap();
        let back = tr.forward(&values).unwrap();
        for (a, b) in amps.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn mode_step_variance_matches_convolution(lam in -500.0f64..-1e-3, dt in 1e-4f64..0.1) {
        let s = ModeStep::new(lam, dt);
        let var = s.noise_factor * s.noise_factor * dt;
        let exact = (1.0 - (2.0 * lam * dt).exp()) / (-2.0 * lam);
        prop_assert!((var - exact).abs() <= 1e-12 * exact.max(1e-300) + 1e-15);
        prop_assert!(s.decay > 0.0 && s.decay < 1.0);
        prop_assert!(s.drift_weight > 0.0 && s.drift_weight <= dt);
    }
}
