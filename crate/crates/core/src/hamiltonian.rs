//! Pointwise Hamiltonian over the finite control set.

use serde::{Deserialize, Serialize};

use crate::dynamics::FeedbackPolicy;
use crate::error::{argument, Result};
use crate::model::{ModelSpec, MAX_MODES};
use crate::spectral::dot;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianResult {
    pub value: f64,
    pub argmin: usize,
    /// Second-best minus best; infinite for a singleton control set.
    pub gap: f64,
}

/// `min_u l(x,q,u) + <z2, b(x,q,u)> + <v, rho(u)>`, ties to the lowest index.
pub fn psi(model: &ModelSpec, x: &[f64], q: &[f64], z2: &[f64], v: &[f64]) -> HamiltonianResult {
    let mut buf = [0.0; MAX_MODES];
    let b = &mut buf[..model.n_slow()];
    let use_z = z2.iter().any(|c| *c != 0.0);
    let use_v = v.iter().any(|c| *c != 0.0);
    let mut best = f64::INFINITY;
    let mut second = f64::INFINITY;
    let mut argmin = 0;
    for (i, u) in model.controls.iter().enumerate() {
        let mut val = model.coeffs.l(x, q, u);
        if use_z {
            model.coeffs.b(x, q, u, b);
            val += dot(z2, b);
        }
        if use_v {
            val += dot(v, model.rho_of(i));
        }
        if val < best {
            second = best;
            best = val;
            argmin = i;
        } else if val < second {
            second = val;
        }
    }
    HamiltonianResult { value: best, argmin, gap: second - best }
}

/// `psi(x, q, z2 / eta, v / sqrt(epsilon))`.
pub fn psi_scaled(
    model: &ModelSpec,
    epsilon: f64,
    eta: f64,
    x: &[f64],
    q: &[f64],
    z2: &[f64],
    v: &[f64],
) -> Result<HamiltonianResult> {
    if !(epsilon > 0.0) || !(eta > 0.0) {
        return Err(argument(format!(
            "scaled Hamiltonian needs epsilon > 0 and eta > 0, got ({epsilon}, {eta})"
        )));
    }
    let mut zb = [0.0; MAX_MODES];
    let mut vb = [0.0; MAX_MODES];
    let zs = &mut zb[..z2.len()];
    let vs = &mut vb[..v.len()];
    zs.iter_mut().zip(z2).for_each(|(o, c)| *o = c / eta);
    let s = epsilon.sqrt();
    vs.iter_mut().zip(v).for_each(|(o, c)| *o = c / s);
    Ok(psi(model, x, q, zs, vs))
}

/// Covector fields `(z2, v)` on the time grid.
pub trait CovectorField: Sync {
    fn eval(&self, step: usize, x: &[f64], q: &[f64], z2: &mut [f64], v: &mut [f64]);
}

impl<F> CovectorField for F
where
    F: Fn(usize, &[f64], &[f64], &mut [f64], &mut [f64]) + Sync,
{
    fn eval(&self, step: usize, x: &[f64], q: &[f64], z2: &mut [f64], v: &mut [f64]) {
        self(step, x, q, z2, v)
    }
}

/// Feedback `u(t, x, q) = argmin psi(x, q, z_scale z2, v_scale v)`.
pub struct GreedyPolicy<'m, C> {
    model: &'m ModelSpec,
    field: C,
    z_scale: f64,
    v_scale: f64,
}

impl<'m, C: CovectorField> GreedyPolicy<'m, C> {
    pub fn with_scales(model: &'m ModelSpec, field: C, z_scale: f64, v_scale: f64) -> Self {
        Self { model, field, z_scale, v_scale }
    }
}

impl<C: CovectorField> FeedbackPolicy for GreedyPolicy<'_, C> {
    fn control(&self, step: usize, x: &[f64], q: &[f64]) -> usize {
        let mut zb = [0.0; MAX_MODES];
        let mut vb = [0.0; MAX_MODES];
        let z = &mut zb[..self.model.n_slow()];
        let v = &mut vb[..self.model.n_noise];
        self.field.eval(step, x, q, z, v);
        z.iter_mut().for_each(|c| *c *= self.z_scale);
        v.iter_mut().for_each(|c| *c *= self.v_scale);
        psi(self.model, x, q, z, v).argmin
    }
}

/// Greedy feedback for the scaled Hamiltonian of the regularized problem.
pub fn greedy_policy<C: CovectorField>(
    model: &ModelSpec,
    epsilon: f64,
    eta: f64,
    field: C,
) -> Result<GreedyPolicy<'_, C>> {
    if !(epsilon > 0.0) || !(eta > 0.0) {
        return Err(argument("greedy policy needs epsilon > 0 and eta > 0"));
    }
    Ok(GreedyPolicy::with_scales(model, field, 1.0 / eta, 1.0 / epsilon.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::table_model;

    #[test]
    fn singleton_and_pair() {
        // l = 3, b = 2, rho = 0, z2 = 1
        let m = table_model(vec![(3.0, 2.0, 0.0)]);
        let r = psi(&m, &[0.0], &[0.0], &[1.0], &[0.0]);
        assert_eq!((r.value, r.argmin), (5.0, 0));
        assert!(r.gap.is_infinite());
        let m = table_model(vec![(1.0, 2.0, 0.0), (3.0, -1.0, 0.0)]);
        let r = psi(&m, &[0.0], &[0.0], &[1.0], &[0.0]);
        assert_eq!((r.value, r.argmin, r.gap), (2.0, 1, 1.0));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let m = table_model(vec![(1.0, 0.0, 0.0), (1.0, 0.0, 0.0)]);
        let r = psi(&m, &[0.0], &[0.0], &[0.0], &[0.0]);
        assert_eq!((r.argmin, r.gap), (0, 0.0));
    }

    #[test]
    fn scaled_rejects_nonpositive() {
        let m = table_model(vec![(1.0, 0.0, 0.0)]);
        assert!(psi_scaled(&m, 0.0, 1.0, &[0.0], &[0.0], &[0.0], &[0.0]).is_err());
        assert!(psi_scaled(&m, 1.0, 0.0, &[0.0], &[0.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn zero_fields_minimize_running_cost() {
        let m = table_model(vec![(0.4, 1.0, 1.0), (0.1, -1.0, -1.0), (0.3, 0.0, 0.0)]);
        let zero = |_: usize, _: &[f64], _: &[f64], z: &mut [f64], v: &mut [f64]| {
            z.fill(0.0);
            v.fill(0.0);
        };
        let p = greedy_policy(&m, 0.1, 0.1, zero).unwrap();
        assert_eq!(p.control(3, &[0.2], &[1.0]), 1);
    }
}
