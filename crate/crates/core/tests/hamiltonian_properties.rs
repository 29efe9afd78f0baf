use proptest::prelude::*;
use twoscale_core::hamiltonian::{psi, psi_scaled};
use twoscale_core::presets::load_preset;
use twoscale_core::ModelSpec;

fn sup_norms(model: &ModelSpec, x: &[f64], q: &[f64]) -> (f64, f64) {
    let mut b = vec![0.0; model.n_slow()];
    let (mut sb, mut sr) = (0.0f64, 0.0f64);
    for (i, u) in model.controls.iter().enumerate() {
        model.coeffs.b(x, q, u, &mut b);
        sb = sb.max(b.iter().map(|c| c * c).sum::<f64>().sqrt());
        sr = sr.max(model.rho_of(i).iter().map(|c| c * c).sum::<f64>().sqrt());
    }
    (sb, sr)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn vec_of(n: usize, r: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-r..r, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psi_is_concave_in_the_covectors(
        x in vec_of(8, 2.0), q in vec_of(8, 3.0),
        z1 in vec_of(8, 4.0), z2 in vec_of(8, 4.0),
        v1 in vec_of(8, 4.0), v2 in vec_of(8, 4.0),
        w in 0.0f64..1.0,
    ) {
        let model = load_preset("reaction_diffusion").unwrap();
        let zm: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| w * a + (1.0 - w) * b).collect();
        let vm: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| w * a + (1.0 - w) * b).collect();
        let mid = psi(&model, &x, &q, &zm, &vm).value;
        let ends = w * psi(&model, &x, &q, &z1, &v1).value + (1.0 - w) * psi(&model, &x, &q, &z2, &v2).value;
        prop_assert!(mid >= ends - 1e-12);
    }

    #[test]
    fn psi_is_lipschitz_in_the_covectors(
        x in vec_of(8, 2.0), q in vec_of(8, 3.0),
        z1 in vec_of(8, 4.0), z2 in vec_of(8, 4.0),
        v1 in vec_of(8, 4.0), v2 in vec_of(8, 4.0),
    ) {
        let model = load_preset("reaction_diffusion").unwrap();
        let (sb, sr) = sup_norms(&model, &x, &q);
        let gap = (psi(&model, &x, &q, &z1, &v1).value - psi(&model, &x, &q, &z2, &v2).value).abs();
        prop_assert!(gap <= sb * dist(&z1, &z2) + sr * dist(&v1, &v2) + 1e-12);
    }

    #[test]
    fn psi_is_the_minimum_over_controls(
        x in vec_of(2, 2.0), q in vec_of(2, 3.0), z in vec_of(2, 4.0),
    ) {
        let model = load_preset("linear_toy").unwrap();
        let v = vec![0.0; model.n_noise];
        let h = psi(&model, &x, &q, &z, &v);
        let mut b = vec![0.0; 2];
        let mut vals = Vec::new();
        for u in &model.controls {
            model.coeffs.b(&x, &q, u, &mut b);
            vals.push(model.coeffs.l(&x, &q, u) + z[0] * b[0] + z[1] * b[1]);
        }
        let best = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!((h.value - best).abs() < 1e-12);
        prop_assert!((vals[h.argmin] - best).abs() < 1e-12);
        prop_assert!(vals[..h.argmin].iter().all(|v| *v > best));
        prop_assert!(h.gap >= 0.0);
    }

    #[test]
    fn scaled_psi_divides_the_covectors(
        x in vec_of(8, 2.0), q in vec_of(8, 3.0), z in vec_of(8, 1.0), v in vec_of(8, 1.0),
        eps in 0.01f64..1.0, eta in 0.01f64..1.0,
    ) {
        let model = load_preset("reaction_diffusion").unwrap();
        let zs: Vec<f64> = z.iter().map(|c| c / eta).collect();
        let vs: Vec<f64> = v.iter().map(|c| c / eps.sqrt()).collect();
        let a = psi_scaled(&model, eps, eta, &x, &q, &z, &v).unwrap();
        let b = psi(&model, &x, &q, &zs, &vs);
        prop_assert!((a.value - b.value).abs() <= 1e-12 * (1.0 + b.value.abs()));
        prop_assert_eq!(a.argmin, b.argmin);
    }
}

#[test]
fn linear_toy_hamiltonian_closed_form() {
    // min over u in {-1,0,1}^2 of c_u |u|^2 + beta <z, u> separates by axis
    let model = load_preset("linear_toy").unwrap();
    let (beta, c_u, c_x, c_q) = (0.5, 0.2, 0.3, 0.2);
    let x = [0.7, -0.2];
    let q = [0.4, 1.0];
    for z in [[0.0, 0.0], [1.0, -0.2], [-2.0, 3.0], [0.4, 0.41]] {
        let h = psi(&model, &x, &q, &z, &[0.0, 0.0]);
        let expected = c_x * 0.7f64.tanh()
            + c_q * 0.4f64.tanh()
            + z.iter().map(|zi| (c_u - beta * zi.abs()).min(0.0)).sum::<f64>();
        assert!((h.value - expected).abs() < 1e-12, "z = {z:?}: {} against {expected}", h.value);
    }
}
