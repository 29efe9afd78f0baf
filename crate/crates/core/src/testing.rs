use std::sync::Arc;

use crate::model::{Coefficients, Constants, ModelParts, ModelSpec};
use crate::spectral::{DiagonalSemigroup, OperatorLabel};

/// Control `i` has constant running cost, slow drift and fast push given by
/// row `i` of the table.
#[derive(Debug)]
struct Table(Vec<(f64, f64, f64)>);

impl Coefficients for Table {
    fn b(&self, _: &[f64], _: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = self.0[u[0] as usize].1;
    }
    fn f(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn r(&self, _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn rho(&self, u: &[f64], out: &mut [f64]) {
        out[0] = self.0[u[0] as usize].2;
    }
    fn l(&self, _: &[f64], _: &[f64], u: &[f64]) -> f64 {
        self.0[u[0] as usize].0
    }
    fn h(&self, _: &[f64]) -> f64 {
        0.0
    }
    fn descriptor(&self) -> String {
        format!("{:?}", self.0)
    }
}

pub(crate) fn table_model(rows: Vec<(f64, f64, f64)>) -> ModelSpec {
    let controls = (0..rows.len()).map(|i| vec![i as f64]).collect();
    let parts = ModelParts {
        name: "table".into(),
        slow_op: DiagonalSemigroup::new(vec![-1.0], OperatorLabel::A).unwrap(),
        fast_op: DiagonalSemigroup::new(vec![-2.0], OperatorLabel::B).unwrap(),
        g: vec![1.0],
        n_noise: 1,
        controls,
        constants: Constants { m: 5.0, lip: 1.0, mu: 2.0, gamma: 0.25 },
        active_dim: 1,
        x0: vec![0.0],
        q0: vec![0.0],
    };
    ModelSpec::new(parts, Arc::new(Table(rows))).unwrap()
}
