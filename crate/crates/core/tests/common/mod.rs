#![allow(dead_code)]

use std::sync::Arc;

use twoscale_core::spectral::{DiagonalSemigroup, OperatorLabel};
use twoscale_core::{Coefficients, Constants, ModelParts, ModelSpec};

/// One slow and one fast mode; a single control with running cost `cost`,
/// terminal cost `x1`, constant `R = r0` and no control effect.
#[derive(Debug)]
pub struct Linear {
    pub cost: f64,
    pub r0: f64,
}

impl Coefficients for Linear {
    fn b(&self, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn f(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn r(&self, _: &[f64], out: &mut [f64]) {
        out.fill(self.r0);
    }
    fn rho(&self, _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn l(&self, _: &[f64], _: &[f64], _: &[f64]) -> f64 {
        self.cost
    }
    fn h(&self, x: &[f64]) -> f64 {
        x[0]
    }
    fn descriptor(&self) -> String {
        format!("linear|{}|{}", self.cost, self.r0)
    }
    fn r_is_zero(&self) -> bool {
        self.r0 == 0.0
    }
}

/// Slow eigenvalue `slow_eig`, fast eigenvalue -2, bound `M = 1`.
pub fn linear_model(cost: f64, r0: f64, slow_eig: f64, x0: f64) -> ModelSpec {
    let parts = ModelParts {
        name: "linear".into(),
        slow_op: DiagonalSemigroup::new(vec![slow_eig], OperatorLabel::A).unwrap(),
        fast_op: DiagonalSemigroup::new(vec![-2.0], OperatorLabel::B).unwrap(),
        g: vec![1.0],
        n_noise: 1,
        controls: vec![vec![0.0]],
        constants: Constants { m: 1.0, lip: 1.0, mu: 2.0, gamma: 0.25 },
        active_dim: 1,
        x0: vec![x0],
        q0: vec![0.0],
    };
    ModelSpec::new(parts, Arc::new(Linear { cost, r0 })).unwrap()
}
