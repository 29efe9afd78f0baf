//! Built-in model instances.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::model::{Coefficients, Constants, ModelParts, ModelSpec};
use crate::spectral::{DiagonalSemigroup, OperatorLabel, SineTransform};

pub const PRESET_NAMES: [&str; 3] = ["reaction_diffusion", "linear_toy", "degenerate_R0"];

pub fn load_preset(name: &str) -> Result<ModelSpec> {
    match name {
        "reaction_diffusion" => ReactionDiffusionParams::default().build(),
        "linear_toy" => LinearToyParams::default().build(),
        "degenerate_R0" => ReactionDiffusionParams::degenerate().build(),
        other => Err(config(format!(
            "unknown preset '{other}'; available: {}",
            PRESET_NAMES.join(", ")
        ))),
    }
}

const MAX_GRID: usize = 256;

/// Controlled reaction-diffusion pair on [0, 1] with Dirichlet conditions.
///
/// Slow: `dX = (nu_s X'' + e1 (b_u u + b_q tanh q1)) dt + R(X) dW1`.
/// Fast: `eps dQ = (nu_f Q'' - m Q + l_f sin(theta x1 e1 - Q) + G u e1) dt + sqrt(eps) G dW2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReactionDiffusionParams {
    pub n_slow: usize,
    pub n_fast: usize,
    /// Interior collocation points for the Nemytskii map.
    pub grid_points: usize,
    pub nu_slow: f64,
    pub nu_fast: f64,
    pub m: f64,
    pub l_f: f64,
    pub theta: f64,
    /// `G` multiplier on mode `k` is `g0 / k`.
    pub g0: f64,
    /// `R` multiplier on mode `k` is `(r0 / k)(1 + tanh x1) / 2`.
    pub r0: f64,
    pub b_u: f64,
    pub b_q: f64,
    pub cost_q: f64,
    pub cost_u: f64,
    pub tau: f64,
    pub h_amp: f64,
    pub h_center: f64,
    pub h_width: f64,
    pub controls: Vec<f64>,
    /// Leading coordinates of the initial slow state; remaining modes are 0.
    pub x0: Vec<f64>,
    pub q0: Vec<f64>,
    pub lip: f64,
}

impl Default for ReactionDiffusionParams {
    fn default() -> Self {
        Self {
            n_slow: 8,
            n_fast: 8,
            grid_points: 31,
            nu_slow: 0.1,
            nu_fast: 0.1,
            m: 1.5,
            l_f: 0.5,
            theta: 1.0,
            g0: 0.8,
            r0: 0.3,
            b_u: 0.6,
            b_q: 0.4,
            cost_q: 0.8,
            cost_u: 0.2,
            tau: 0.3,
            h_amp: 0.9,
            h_center: 0.4,
            h_width: 0.5,
            controls: vec![-1.0, 0.0, 1.0],
            x0: vec![0.0],
            q0: vec![4.0],
            lip: 2.5,
        }
    }
}

impl ReactionDiffusionParams {
    pub fn degenerate() -> Self {
        Self { r0: 0.0, ..Self::default() }
    }

    pub fn name(&self) -> &'static str {
        if self.r0 == 0.0 {
            "degenerate_R0"
        } else {
            "reaction_diffusion"
        }
    }

    pub fn build(&self) -> Result<ModelSpec> {
        if self.grid_points > MAX_GRID {
            return Err(config(format!("grid_points above {MAX_GRID}")));
        }
        if !(self.m > self.l_f) {
            return Err(config("the shift m must exceed the Lipschitz constant of f"));
        }
        if self.x0.len() > self.n_slow || self.q0.len() > self.n_fast {
            return Err(config("initial state has more coordinates than modes"));
        }
        let transform = SineTransform::new(self.grid_points, self.n_fast)?;
        let mut e1 = vec![0.0; self.grid_points];
        let mut unit = vec![0.0; self.n_fast];
        unit[0] = 1.0;
        transform.from_modes_into(&unit, &mut e1);
        let umax = self.controls.iter().fold(0.0f64, |a, u| a.max(u.abs()));
        let bound = [
            self.b_u * umax + self.b_q,
            self.cost_q + self.cost_u * umax,
            self.h_amp,
            umax,
        ]
        .into_iter()
        .fold(0.0, f64::max);
        let constants = Constants {
            m: bound,
            lip: self.lip,
            mu: self.nu_fast * PI * PI + self.m - self.l_f,
            gamma: 0.25,
        };
        let mut x0 = vec![0.0; self.n_slow];
        x0[..self.x0.len()].copy_from_slice(&self.x0);
        let mut q0 = vec![0.0; self.n_fast];
        q0[..self.q0.len()].copy_from_slice(&self.q0);
        let parts = ModelParts {
            name: self.name().into(),
            slow_op: DiagonalSemigroup::laplacian(self.n_slow, self.nu_slow, 0.0, OperatorLabel::A)?,
            fast_op: DiagonalSemigroup::laplacian(self.n_fast, self.nu_fast, self.m, OperatorLabel::B)?,
            g: (1..=self.n_fast).map(|k| self.g0 / k as f64).collect(),
            n_noise: self.n_fast,
            controls: self.controls.iter().map(|u| vec![*u]).collect(),
            constants,
            active_dim: 1,
            x0,
            q0,
        };
        let coeffs = RdCoefficients { p: self.clone(), transform, e1 };
        ModelSpec::new(parts, Arc::new(coeffs))
    }
}

#[derive(Debug)]
struct RdCoefficients {
    p: ReactionDiffusionParams,
    transform: SineTransform,
    e1: Vec<f64>,
}

impl Coefficients for RdCoefficients {
    fn b(&self, _x: &[f64], q: &[f64], u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[0] = self.p.b_u * u[0] + self.p.b_q * q[0].tanh();
    }

    fn f(&self, x: &[f64], q: &[f64], out: &mut [f64]) {
        let n = self.p.grid_points;
        let mut qb = [0.0; MAX_GRID];
        let qg = &mut qb[..n];
        self.transform.from_modes_into(q, qg);
        let shift = self.p.theta * x[0];
        for (v, e) in qg.iter_mut().zip(&self.e1) {
            *v = self.p.l_f * (shift * e - *v).sin();
        }
        self.transform.to_modes_into(qg, out);
    }

    fn r(&self, x: &[f64], out: &mut [f64]) {
        let s = 0.5 + 0.5 * x[0].tanh();
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.p.r0 / (k + 1) as f64 * s;
        }
    }

    fn rho(&self, u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[0] = u[0];
    }

    fn l(&self, _x: &[f64], q: &[f64], u: &[f64]) -> f64 {
        self.p.cost_q * (q[0] - self.p.tau).powi(2).min(1.0) + self.p.cost_u * u[0].abs()
    }

    fn h(&self, x: &[f64]) -> f64 {
        let d = (x[0] - self.p.h_center) / self.p.h_width;
        self.p.h_amp * (1.0 - 2.0 * (-0.5 * d * d).exp())
    }

    fn descriptor(&self) -> String {
        format!("rd{:?}", self.p)
    }

    fn ergodic_descriptor(&self) -> String {
        let p = &self.p;
        format!(
            "rd-erg|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{:?}",
            p.grid_points,
            p.nu_fast,
            p.m,
            p.l_f,
            p.theta,
            p.g0,
            p.b_u,
            p.b_q,
            p.cost_q,
            p.cost_u,
            p.tau,
            p.controls
        )
    }

    fn r_is_zero(&self) -> bool {
        self.p.r0 == 0.0
    }
}

/// Two slow and two fast modes, linear fast dynamics and an explicitly
/// computable ergodic value:
/// `lambda(x, z) = c_x tanh x1 + sum_i min(0, c_u - beta |z_i|)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearToyParams {
    pub nu_slow: f64,
    pub nu_fast: f64,
    pub m: f64,
    pub g: f64,
    pub r0: f64,
    pub beta: f64,
    pub c_u: f64,
    pub c_x: f64,
    pub c_q: f64,
    pub h_amp: f64,
    pub x0: Vec<f64>,
    pub q0: Vec<f64>,
    pub lip: f64,
}

impl Default for LinearToyParams {
    fn default() -> Self {
        Self {
            nu_slow: 0.1,
            nu_fast: 0.1,
            m: 2.0,
            g: 0.5,
            r0: 0.3,
            beta: 0.5,
            c_u: 0.2,
            c_x: 0.3,
            c_q: 0.2,
            h_amp: 0.8,
            x0: vec![0.0, 0.0],
            q0: vec![0.0, 0.0],
            lip: 1.5,
        }
    }
}

impl LinearToyParams {
    pub fn build(&self) -> Result<ModelSpec> {
        if self.x0.len() != 2 || self.q0.len() != 2 {
            return Err(config("linear_toy has two slow and two fast modes"));
        }
        let controls: Vec<Vec<f64>> = [-1.0, 0.0, 1.0]
            .iter()
            .flat_map(|a| [-1.0, 0.0, 1.0].iter().map(move |b| vec![*a, *b]))
            .collect();
        let bound = [
            self.beta * 2f64.sqrt(),
            2.0 * self.c_u + self.c_x + self.c_q,
            self.h_amp,
        ]
        .into_iter()
        .fold(0.0, f64::max);
        let fast_op = DiagonalSemigroup::laplacian(2, self.nu_fast, self.m, OperatorLabel::B)?;
        let constants = Constants {
            m: bound,
            lip: self.lip,
            mu: -fast_op.max_eigenvalue(),
            gamma: 0.25,
        };
        let parts = ModelParts {
            name: "linear_toy".into(),
            slow_op: DiagonalSemigroup::laplacian(2, self.nu_slow, 0.0, OperatorLabel::A)?,
            fast_op,
            g: vec![self.g; 2],
            n_noise: 2,
            controls,
            constants,
            active_dim: 2,
            x0: self.x0.clone(),
            q0: self.q0.clone(),
        };
        ModelSpec::new(parts, Arc::new(ToyCoefficients(self.clone())))
    }

    /// Closed-form ergodic value.
    pub fn lambda(&self, x1: f64, z: &[f64]) -> f64 {
        self.c_x * x1.tanh()
            + z.iter().map(|zi| (self.c_u - self.beta * zi.abs()).min(0.0)).sum::<f64>()
    }
}

#[derive(Debug)]
struct ToyCoefficients(LinearToyParams);

impl Coefficients for ToyCoefficients {
    fn b(&self, _x: &[f64], _q: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = self.0.beta * u[0];
        out[1] = self.0.beta * u[1];
    }

    fn f(&self, _x: &[f64], _q: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn r(&self, _x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.0.r0 / (k + 1) as f64;
        }
    }

    fn rho(&self, _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn l(&self, x: &[f64], q: &[f64], u: &[f64]) -> f64 {
        self.0.c_u * (u[0] * u[0] + u[1] * u[1]) + self.0.c_x * x[0].tanh() + self.0.c_q * q[0].tanh()
    }

    fn h(&self, x: &[f64]) -> f64 {
        self.0.h_amp * (x[0] + x[1]).tanh()
    }

    fn descriptor(&self) -> String {
        format!("toy{:?}", self.0)
    }

    fn ergodic_descriptor(&self) -> String {
        let p = &self.0;
        format!(
            "toy-erg|{}|{}|{}|{}|{}|{}|{}",
            p.nu_fast, p.m, p.g, p.beta, p.c_u, p.c_x, p.c_q
        )
    }
}

/// Reaction-diffusion preset with a single slow and a single fast mode.
pub fn single_mode_reaction_diffusion() -> Result<ModelSpec> {
    ReactionDiffusionParams { n_slow: 1, n_fast: 1, ..Default::default() }.build()
}

/// One fast Ornstein-Uhlenbeck mode with eigenvalue `-(pi^2 + m)`, no control
/// effect and running cost `min(q^2, 1)`.
pub fn single_mode_ou(m: f64, g: f64) -> Result<ModelSpec> {
    let parts = ModelParts {
        name: "single_mode_ou".into(),
        slow_op: DiagonalSemigroup::laplacian(1, 1.0, 0.0, OperatorLabel::A)?,
        fast_op: DiagonalSemigroup::laplacian(1, 1.0, m, OperatorLabel::B)?,
        g: vec![g],
        n_noise: 1,
        controls: vec![vec![0.0]],
        constants: Constants { m: 1.0, lip: 2.0, mu: PI * PI + m, gamma: 0.25 },
        active_dim: 1,
        x0: vec![0.0],
        q0: vec![0.0],
    };
    ModelSpec::new(parts, Arc::new(OuCoefficients { m, g }))
}

#[derive(Debug)]
struct OuCoefficients {
    m: f64,
    g: f64,
}

impl Coefficients for OuCoefficients {
    fn b(&self, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn f(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn r(&self, _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn rho(&self, _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn l(&self, _: &[f64], q: &[f64], _: &[f64]) -> f64 {
        (q[0] * q[0]).min(1.0)
    }
    fn h(&self, _: &[f64]) -> f64 {
        0.0
    }
    fn descriptor(&self) -> String {
        format!("ou|{}|{}", self.m, self.g)
    }
    fn r_is_zero(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESET_NAMES {
            let m = load_preset(name).unwrap();
            let rep = m.validate(400, 3);
            assert!(rep.passed(), "{name}: {:?}", rep.checks);
            assert!(rep.leading_mode_only, "{name}");
        }
        assert!(load_preset("nope").unwrap_err().to_string().contains("linear_toy"));
    }

    #[test]
    fn reaction_diffusion_margin() {
        let m = load_preset("reaction_diffusion").unwrap();
        let mu = 0.1 * PI * PI + 1.5 - 0.5;
        assert!((m.constants.mu - mu).abs() < 1e-12);
        assert!(m.validate(400, 1).dissipativity_margin >= -1e-9);
    }

    #[test]
    fn degenerate_has_zero_r() {
        let m = load_preset("degenerate_R0").unwrap();
        assert!(m.coeffs.r_is_zero());
        let mut r = vec![1.0; m.n_slow()];
        m.coeffs.r(&[0.3; 8], &mut r);
        assert!(r.iter().all(|v| *v == 0.0));
    }
}
