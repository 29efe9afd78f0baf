//! Exponential-Euler integration of the slow/fast system, the frozen fast
//! equation and the reduced slow equation.
//!
//! Every mode is advanced with its linear part exact, the nonlinear drift
//! frozen over the step and the stochastic convolution sampled with its exact
//! per-mode variance, so stiff fast modes stay stable for any `dt / epsilon`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{argument, config, Error, Result};
use crate::model::ModelSpec;
use crate::spectral::{norm, BrownianSource, ModeStep, ModeVector, NoiseStream};
use crate::stats::fit_line;

/// Horizon of the control problem.
pub const HORIZON: f64 = 1.0;

/// Feedback control evaluated at grid step `step` (time `step * dt`).
pub trait FeedbackPolicy: Sync {
    fn control(&self, step: usize, x: &[f64], q: &[f64]) -> usize;
}

impl<F> FeedbackPolicy for F
where
    F: Fn(usize, &[f64], &[f64]) -> usize + Sync,
{
    fn control(&self, step: usize, x: &[f64], q: &[f64]) -> usize {
        self(step, x, q)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConstantPolicy(pub usize);

impl FeedbackPolicy for ConstantPolicy {
    fn control(&self, _: usize, _: &[f64], _: &[f64]) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoScaleParams {
    pub epsilon: f64,
    pub eta: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub x0: ModeVector,
    pub q0: ModeVector,
    /// Each step increment is the sum of this many base increments, so grids
    /// of different resolution can share one Brownian path.
    pub noise_substeps: usize,
}

/// Number of steps for the default `dt = min(epsilon/10, 1/200)`.
pub fn default_steps(epsilon: f64) -> usize {
    let dt = (epsilon / 10.0).min(1.0 / 200.0);
    (HORIZON / dt - 1e-9).ceil() as usize
}

impl TwoScaleParams {
    pub fn new(epsilon: f64, eta: f64, x0: ModeVector, q0: ModeVector) -> Result<Self> {
        Self::with_steps(epsilon, eta, default_steps(epsilon), x0, q0)
    }

    pub fn with_steps(
        epsilon: f64,
        eta: f64,
        n_steps: usize,
        x0: ModeVector,
        q0: ModeVector,
    ) -> Result<Self> {
        if n_steps == 0 {
            return Err(argument("n_steps must be positive"));
        }
        let p = Self {
            epsilon,
            eta,
            dt: HORIZON / n_steps as f64,
            n_steps,
            x0,
            q0,
            noise_substeps: 1,
        };
        p.check_scalars()?;
        Ok(p)
    }

    /// Default resolution rounded up to a divisor of `base_steps`; noise is
    /// generated on the base grid. Runs at different `epsilon` built with the
    /// same `base_steps` and seed see the same Brownian paths.
    pub fn on_common_grid(
        epsilon: f64,
        eta: f64,
        x0: ModeVector,
        q0: ModeVector,
        base_steps: usize,
    ) -> Result<Self> {
        let need = default_steps(epsilon);
        let n_steps = (need..=base_steps)
            .find(|n| base_steps % n == 0)
            .ok_or_else(|| {
                config(format!("base grid of {base_steps} steps is coarser than {need}"))
            })?;
        let mut p = Self::with_steps(epsilon, eta, n_steps, x0, q0)?;
        p.noise_substeps = base_steps / n_steps;
        Ok(p)
    }

    pub fn from_model(model: &ModelSpec, epsilon: f64, eta: f64) -> Result<Self> {
        Self::new(epsilon, eta, model.x0.clone().into(), model.q0.clone().into())
    }

    fn check_scalars(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(argument(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.eta >= 0.0) {
            return Err(argument(format!("eta must be nonnegative, got {}", self.eta)));
        }
        if ((self.n_steps as f64) * self.dt - HORIZON).abs() > 1e-9 {
            return Err(argument("n_steps * dt must equal the unit horizon"));
        }
        Ok(())
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        self.check_scalars()?;
        if self.noise_substeps == 0 {
            return Err(argument("noise_substeps must be positive"));
        }
        self.x0.check_dim(model.n_slow(), "x0")?;
        self.q0.check_dim(model.n_fast(), "q0")?;
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| k as f64 * self.dt).collect()
    }
}

/// Per-path noise for the three Wiener processes.
pub(crate) struct PathNoise {
    w1: BrownianSource,
    w2: BrownianSource,
    b: BrownianSource,
    substeps: u64,
    base_dt: f64,
    b_sign: f64,
}

impl PathNoise {
    pub(crate) fn new(model: &ModelSpec, seed: u64, path: u64, dt: f64, substeps: usize) -> Self {
        Self {
            w1: BrownianSource::new(seed, NoiseStream::W1, path, model.n_noise),
            w2: BrownianSource::new(seed, NoiseStream::W2, path, model.n_noise),
            b: BrownianSource::new(seed, NoiseStream::B, path, model.n_slow()),
            substeps: substeps as u64,
            base_dt: dt / substeps as f64,
            b_sign: 1.0,
        }
    }

    /// Negates the regularization noise, for antithetic pairs.
    pub(crate) fn flip_b(mut self, flip: bool) -> Self {
        self.b_sign = if flip { -1.0 } else { 1.0 };
        self
    }

    fn draw(src: &mut BrownianSource, step: usize, sub: u64, base_dt: f64, out: &mut [f64]) {
        if sub == 1 {
            src.fill(step as u64, base_dt, out);
        } else {
            src.fill_sum(step as u64 * sub, sub, base_dt, out);
        }
    }

    pub(crate) fn w1(&mut self, step: usize, out: &mut [f64]) {
        Self::draw(&mut self.w1, step, self.substeps, self.base_dt, out)
    }

    pub(crate) fn w2(&mut self, step: usize, out: &mut [f64]) {
        Self::draw(&mut self.w2, step, self.substeps, self.base_dt, out)
    }

    pub(crate) fn b(&mut self, step: usize, out: &mut [f64]) {
        Self::draw(&mut self.b, step, self.substeps, self.base_dt, out);
        if self.b_sign < 0.0 {
            out.iter_mut().for_each(|v| *v = -*v);
        }
    }
}

/// One-step maps with preallocated scratch.
pub(crate) struct Integrator<'m> {
    pub(crate) model: &'m ModelSpec,
    slow: Vec<ModeStep>,
    fast: Vec<ModeStep>,
    eta: f64,
    inv_eps: f64,
    fast_noise: Vec<f64>,
    b: Vec<f64>,
    f: Vec<f64>,
    r: Vec<f64>,
}

impl<'m> Integrator<'m> {
    pub(crate) fn new(model: &'m ModelSpec, epsilon: f64, eta: f64, dt: f64) -> Self {
        let slow = model.slow_op.eigenvalues.iter().map(|&a| ModeStep::new(a, dt)).collect();
        let fast: Vec<ModeStep> = model
            .fast_op
            .eigenvalues
            .iter()
            .map(|&b| ModeStep::new(b / epsilon, dt))
            .collect();
        let fast_noise = fast
            .iter()
            .zip(&model.g)
            .map(|(s, g)| s.noise_factor * g / epsilon.sqrt())
            .collect();
        Self {
            model,
            slow,
            fast,
            eta,
            inv_eps: 1.0 / epsilon,
            fast_noise,
            b: vec![0.0; model.n_slow()],
            f: vec![0.0; model.n_fast()],
            r: vec![0.0; model.n_slow()],
        }
    }

    /// Frozen fast equation: unit speed, slow state held fixed.
    pub(crate) fn frozen(model: &'m ModelSpec, dt: f64) -> Self {
        Self::new(model, 1.0, 0.0, dt)
    }

    pub(crate) fn step(
        &mut self,
        x: &mut [f64],
        q: &mut [f64],
        u: Option<usize>,
        dw1: &[f64],
        dw2: &[f64],
        db: &[f64],
    ) {
        let m = self.model;
        let co = &m.coeffs;
        match u {
            Some(i) => co.b(x, q, &m.controls[i], &mut self.b),
            None => self.b.iter_mut().for_each(|v| *v = 0.0),
        }
        co.f(x, q, &mut self.f);
        co.r(x, &mut self.r);
        for k in 0..x.len() {
            let s = &self.slow[k];
            let noise = self.r[k] * dw1[k] + self.eta * db[k];
            x[k] = s.decay * x[k] + s.drift_weight * self.b[k] + s.noise_factor * noise;
        }
        self.advance_fast(q, u, dw2);
    }

    fn advance_fast(&mut self, q: &mut [f64], u: Option<usize>, dw2: &[f64]) {
        let m = self.model;
        let rho = u.map(|i| m.rho_of(i));
        for k in 0..q.len() {
            let s = &self.fast[k];
            let push = rho.map_or(0.0, |r| m.g[k] * r[k]);
            q[k] = s.decay * q[k]
                + s.drift_weight * (self.f[k] + push) * self.inv_eps
                + self.fast_noise[k] * dw2[k];
        }
    }

    pub(crate) fn step_frozen(&mut self, x: &[f64], q: &mut [f64], u: Option<usize>, dw2: &[f64]) {
        self.model.coeffs.f(x, q, &mut self.f);
        self.advance_fast(q, u, dw2);
    }

    /// Slow-only step with drift `-alpha` on the leading modes.
    pub(crate) fn step_reduced(&mut self, x: &mut [f64], alpha: &[f64], dw1: &[f64], db: &[f64]) {
        self.model.coeffs.r(x, &mut self.r);
        for k in 0..x.len() {
            let s = &self.slow[k];
            let drift = if k < alpha.len() { -alpha[k] } else { 0.0 };
            let noise = self.r[k] * dw1[k] + self.eta * db[k];
            x[k] = s.decay * x[k] + s.drift_weight * drift + s.noise_factor * noise;
        }
    }
}

pub(crate) fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|c| c.is_finite())
}

/// View of the state at the start of a step together with the increments
/// that advance it. At the terminal visit the increments are empty and the
/// control is `None`.
pub struct StepView<'a> {
    pub step: usize,
    pub x: &'a [f64],
    pub q: &'a [f64],
    pub u: Option<usize>,
    pub dw1: &'a [f64],
    pub dw2: &'a [f64],
    pub db: &'a [f64],
}

/// Integrates one path of the two-scale system, calling `visit` before every
/// step and once at the terminal time.
pub(crate) fn run_two_scale<V>(
    model: &ModelSpec,
    params: &TwoScaleParams,
    policy: Option<&dyn FeedbackPolicy>,
    seed: u64,
    path: u64,
    flip_b: bool,
    mut visit: V,
) -> Result<()>
where
    V: FnMut(&StepView),
{
    let mut integ = Integrator::new(model, params.epsilon, params.eta, params.dt);
    let mut noise =
        PathNoise::new(model, seed, path, params.dt, params.noise_substeps).flip_b(flip_b);
    let mut x = params.x0.coeffs.clone();
    let mut q = params.q0.coeffs.clone();
    let mut dw1 = vec![0.0; model.n_noise];
    let mut dw2 = vec![0.0; model.n_noise];
    let mut db = vec![0.0; model.n_slow()];
    for step in 0..params.n_steps {
        let u = policy.map(|p| p.control(step, &x, &q));
        noise.w1(step, &mut dw1);
        noise.w2(step, &mut dw2);
        if params.eta > 0.0 {
            noise.b(step, &mut db);
        }
        visit(&StepView { step, x: &x, q: &q, u, dw1: &dw1, dw2: &dw2, db: &db });
        integ.step(&mut x, &mut q, u, &dw1, &dw2, &db);
        if !all_finite(&x) || !all_finite(&q) {
            return Err(Error::Diverged { step: step + 1, what: "two-scale path".into() });
        }
    }
    visit(&StepView {
        step: params.n_steps,
        x: &x,
        q: &q,
        u: None,
        dw1: &[],
        dw2: &[],
        db: &[],
    });
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathBundle {
    pub epsilon: f64,
    pub eta: f64,
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub dw1: Vec<Vec<f64>>,
    pub dw2: Vec<Vec<f64>>,
    pub db: Vec<Vec<f64>>,
    pub u: Option<Vec<usize>>,
}

impl PathBundle {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// One row per grid time: `t, x_*, q_*, dw1_*, dw2_*, db_*, u`. Increment
    /// columns on a row hold the increments applied after that time.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let ns = self.x[0].len();
        let nf = self.q[0].len();
        let nn = self.dw1.first().map_or(0, |v| v.len());
        let nb = self.db.first().map_or(0, |v| v.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=ns).map(|k| format!("x{k}")));
        header.extend((1..=nf).map(|k| format!("q{k}")));
        header.extend((1..=nn).map(|k| format!("dw1_{k}")));
        header.extend((1..=nn).map(|k| format!("dw2_{k}")));
        header.extend((1..=nb).map(|k| format!("db{k}")));
        header.push("u".into());
        w.write_record(&header).map_err(fmt_err)?;
        for (i, t) in self.times.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(self.x[i].iter().map(|v| v.to_string()));
            row.extend(self.q[i].iter().map(|v| v.to_string()));
            for inc in [&self.dw1, &self.dw2] {
                match inc.get(i) {
                    Some(v) => row.extend(v.iter().map(|c| c.to_string())),
                    None => row.extend(std::iter::repeat_n(String::new(), nn)),
                }
            }
            match self.db.get(i) {
                Some(v) => row.extend(v.iter().map(|c| c.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), nb)),
            }
            let u = self.u.as_ref().and_then(|u| u.get(i)).map(|c| c.to_string());
            row.push(u.unwrap_or_default());
            w.write_record(&row).map_err(fmt_err)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }
}

pub(crate) fn fmt_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// One seeded path of the controlled system; `policy = None` drops `b` and
/// `rho`, giving the uncontrolled forward system.
pub fn simulate_pair(
    model: &ModelSpec,
    params: &TwoScaleParams,
    policy: Option<&dyn FeedbackPolicy>,
    seed: u64,
    path: u64,
) -> Result<PathBundle> {
    params.validate(model)?;
    let n = params.n_steps;
    let mut bundle = PathBundle {
        epsilon: params.epsilon,
        eta: params.eta,
        times: params.times(),
        x: Vec::with_capacity(n + 1),
        q: Vec::with_capacity(n + 1),
        dw1: Vec::with_capacity(n),
        dw2: Vec::with_capacity(n),
        db: Vec::with_capacity(n),
        u: policy.map(|_| Vec::with_capacity(n)),
    };
    run_two_scale(model, params, policy, seed, path, false, |v| {
        bundle.x.push(v.x.to_vec());
        bundle.q.push(v.q.to_vec());
        if v.step < n {
            bundle.dw1.push(v.dw1.to_vec());
            bundle.dw2.push(v.dw2.to_vec());
            bundle.db.push(v.db.to_vec());
            if let (Some(us), Some(u)) = (bundle.u.as_mut(), v.u) {
                us.push(u);
            }
        }
    })?;
    Ok(bundle)
}

/// Re-integrates the stored increments and controls of `bundle`.
pub fn replay(model: &ModelSpec, bundle: &PathBundle) -> Result<PathBundle> {
    let n = bundle.n_steps();
    let dt = bundle.times[1] - bundle.times[0];
    let mut integ = Integrator::new(model, bundle.epsilon, bundle.eta, dt);
    let mut out = bundle.clone();
    let mut x = bundle.x[0].clone();
    let mut q = bundle.q[0].clone();
    for step in 0..n {
        let u = bundle.u.as_ref().map(|u| u[step]);
        integ.step(&mut x, &mut q, u, &bundle.dw1[step], &bundle.dw2[step], &bundle.db[step]);
        out.x[step + 1].copy_from_slice(&x);
        out.q[step + 1].copy_from_slice(&q);
    }
    Ok(out)
}

/// Slope of `log |Q_t - Q'_t|` against `t` over `[0, window]` for two
/// uncontrolled runs sharing every increment, started from `params.q0` and
/// `q_alt`.
pub fn contraction_slope(
    model: &ModelSpec,
    params: &TwoScaleParams,
    q_alt: &ModeVector,
    window: f64,
    seed: u64,
    path: u64,
) -> Result<f64> {
    let mut alt = params.clone();
    alt.q0 = q_alt.clone();
    let a = simulate_pair(model, params, None, seed, path)?;
    let b = simulate_pair(model, &alt, None, seed, path)?;
    let (mut ts, mut ls) = (Vec::new(), Vec::new());
    for (i, t) in a.times.iter().enumerate() {
        if *t > window * (1.0 + 1e-12) {
            break;
        }
        let d: Vec<f64> = a.q[i].iter().zip(&b.q[i]).map(|(u, v)| u - v).collect();
        let n = norm(&d);
        if n > 0.0 {
            ts.push(*t);
            ls.push(n.ln());
        }
    }
    fit_line(&ts, &ls)
        .map(|f| f.slope)
        .ok_or_else(|| argument("contraction window holds fewer than two separated points"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FastTrajectory {
    pub times: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub u: Vec<Option<usize>>,
}

/// Frozen-`x` fast path started from `q_init` (zero by default).
#[allow(clippy::too_many_arguments)]
pub fn simulate_frozen_fast(
    model: &ModelSpec,
    x: &ModeVector,
    q_init: Option<&ModeVector>,
    policy: Option<&dyn FeedbackPolicy>,
    horizon: f64,
    dt: f64,
    seed: u64,
    path: u64,
) -> Result<FastTrajectory> {
    if !(horizon > 0.0) || !(dt > 0.0) {
        return Err(argument("frozen fast path needs positive horizon and dt"));
    }
    x.check_dim(model.n_slow(), "x")?;
    let n = (horizon / dt).round() as usize;
    let mut q = match q_init {
        Some(q0) => {
            q0.check_dim(model.n_fast(), "q_init")?;
            q0.coeffs.clone()
        }
        None => vec![0.0; model.n_fast()],
    };
    let mut integ = Integrator::frozen(model, dt);
    let mut src = BrownianSource::new(seed, NoiseStream::W2, path, model.n_noise);
    let mut dw = vec![0.0; model.n_noise];
    let mut traj = FastTrajectory {
        times: (0..=n).map(|k| k as f64 * dt).collect(),
        q: vec![q.clone()],
        u: Vec::with_capacity(n),
    };
    for step in 0..n {
        let u = policy.map(|p| p.control(step, x, &q));
        src.fill(step as u64, dt, &mut dw);
        integ.step_frozen(x, &mut q, u, &dw);
        if !all_finite(&q) {
            return Err(Error::Diverged { step: step + 1, what: "frozen fast path".into() });
        }
        traj.u.push(u);
        traj.q.push(q.clone());
    }
    Ok(traj)
}

/// Feedback for the reduced equation; values are clipped to the ball of
/// radius `M + 1` by the simulator.
pub trait AlphaPolicy: Sync {
    /// Writes `alpha` (length = active dimension) at step `step`.
    fn alpha(&self, step: usize, x: &[f64], out: &mut [f64]);
}

impl<F> AlphaPolicy for F
where
    F: Fn(usize, &[f64], &mut [f64]) + Sync,
{
    fn alpha(&self, step: usize, x: &[f64], out: &mut [f64]) {
        self(step, x, out)
    }
}

/// Radial projection onto the closed ball; returns true if it clipped.
pub fn clip_to_ball(alpha: &mut [f64], radius: f64) -> bool {
    let n = norm(alpha);
    if n > radius {
        let s = radius / n;
        alpha.iter_mut().for_each(|a| *a *= s);
        true
    } else {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedPath {
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub clipped: usize,
}

/// Runs one reduced path, visiting `(step, x, alpha)` before each step and
/// `(n_steps, x, [])` at the end. Returns the number of clipped controls.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_reduced<V>(
    model: &ModelSpec,
    eta: f64,
    policy: &dyn AlphaPolicy,
    x0: &[f64],
    n_steps: usize,
    substeps: usize,
    seed: u64,
    path: u64,
    mut visit: V,
) -> Result<usize>
where
    V: FnMut(usize, &[f64], &[f64]),
{
    let dt = HORIZON / n_steps as f64;
    let radius = model.constants.m + 1.0;
    let mut integ = Integrator::new(model, 1.0, eta, dt);
    let mut noise = PathNoise::new(model, seed, path, dt, substeps);
    let mut x = x0.to_vec();
    let mut alpha = vec![0.0; model.active_dim];
    let mut dw1 = vec![0.0; model.n_noise];
    let mut db = vec![0.0; model.n_slow()];
    let zero_r = model.coeffs.r_is_zero();
    let mut clipped = 0;
    for step in 0..n_steps {
        policy.alpha(step, &x, &mut alpha);
        if clip_to_ball(&mut alpha, radius) {
            clipped += 1;
        }
        if !zero_r {
            noise.w1(step, &mut dw1);
        }
        if eta > 0.0 {
            noise.b(step, &mut db);
        }
        visit(step, &x, &alpha);
        integ.step_reduced(&mut x, &alpha, &dw1, &db);
        if !all_finite(&x) {
            return Err(Error::Diverged { step: step + 1, what: "reduced path".into() });
        }
    }
    visit(n_steps, &x, &[]);
    Ok(clipped)
}

pub fn simulate_reduced(
    model: &ModelSpec,
    eta: f64,
    policy: &dyn AlphaPolicy,
    params: &TwoScaleParams,
    seed: u64,
    path: u64,
) -> Result<ReducedPath> {
    params.x0.check_dim(model.n_slow(), "x0")?;
    if !(eta >= 0.0) {
        return Err(argument("eta must be nonnegative"));
    }
    let mut out = ReducedPath {
        times: params.times(),
        x: Vec::new(),
        alpha: Vec::new(),
        clipped: 0,
    };
    let clipped = run_reduced(
        model,
        eta,
        policy,
        &params.x0,
        params.n_steps,
        params.noise_substeps,
        seed,
        path,
        |_, x, a| {
            out.x.push(x.to_vec());
            if !a.is_empty() {
                out.alpha.push(a.to_vec());
            }
        },
    )?;
    if clipped > 0 {
        log::warn!("reduced simulation clipped {clipped} controls to the admissible ball");
    }
    out.clipped = clipped;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub p: u32,
    /// `E sup_t |X_t|^p`
    pub sup_x: f64,
    pub sup_x_stderr: f64,
    /// `sup_t E |Q_t|^p`
    pub sup_q: f64,
    pub sup_q_stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub epsilon: f64,
    pub eta: f64,
    pub rows: Vec<MomentRow>,
}

impl MomentReport {
    pub fn row(&self, p: u32) -> Option<&MomentRow> {
        self.rows.iter().find(|r| r.p == p)
    }
}

pub fn moment_report(
    model: &ModelSpec,
    params: &TwoScaleParams,
    policy: Option<&dyn FeedbackPolicy>,
    n_paths: usize,
    seed: u64,
) -> Result<MomentReport> {
    params.validate(model)?;
    const PS: [u32; 3] = [1, 2, 4];
    let per_path: Vec<(f64, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut sup_x = 0.0f64;
            let mut qn = Vec::with_capacity(params.n_steps + 1);
            run_two_scale(model, params, policy, seed, path as u64, false, |v| {
                sup_x = sup_x.max(norm(v.x));
                qn.push(norm(v.q));
            })?;
            Ok((sup_x, qn))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for p in PS {
        let sx: Vec<f64> = per_path.iter().map(|(s, _)| s.powi(p as i32)).collect();
        let (mx, sex) = crate::stats::mean_stderr(&sx);
        let mut best = (f64::NEG_INFINITY, 0.0);
        for t in 0..=params.n_steps {
            let col: Vec<f64> = per_path.iter().map(|(_, q)| q[t].powi(p as i32)).collect();
            let (m, se) = crate::stats::mean_stderr(&col);
            if m > best.0 {
                best = (m, se);
            }
        }
        rows.push(MomentRow { p, sup_x: mx, sup_x_stderr: sex, sup_q: best.0, sup_q_stderr: best.1 });
    }
    Ok(MomentReport { epsilon: params.epsilon, eta: params.eta, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentGrid {
    pub reports: Vec<MomentReport>,
    /// Largest over smallest `E sup|X|^2` across the grid.
    pub spread: f64,
    /// False when the spread exceeds 2.
    pub uniform: bool,
}

/// Moment reports over an `(epsilon, eta)` grid with the uniformity flag.
pub fn moment_grid(
    model: &ModelSpec,
    epsilons: &[f64],
    etas: &[f64],
    policy: Option<&dyn FeedbackPolicy>,
    n_paths: usize,
    seed: u64,
) -> Result<MomentGrid> {
    let mut reports = Vec::new();
    for &e in epsilons {
        for &h in etas {
            let p = TwoScaleParams::from_model(model, e, h)?;
            reports.push(moment_report(model, &p, policy, n_paths, seed)?);
        }
    }
    let vals: Vec<f64> = reports.iter().filter_map(|r| r.row(2).map(|w| w.sup_x)).collect();
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread = if lo > 0.0 { hi / lo } else if hi == 0.0 { 1.0 } else { f64::INFINITY };
    Ok(MomentGrid { reports, spread, uniform: spread <= 2.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::ReactionDiffusionParams;

    #[test]
    fn default_steps_follow_rule() {
        assert_eq!(default_steps(0.5), 200);
        assert_eq!(default_steps(0.05), 200);
        assert_eq!(default_steps(0.02), 500);
        let p = TwoScaleParams::on_common_grid(
            0.02,
            0.0,
            ModeVector::zeros(1),
            ModeVector::zeros(1),
            1000,
        )
        .unwrap();
        assert_eq!((p.n_steps, p.noise_substeps), (500, 2));
        assert!(TwoScaleParams::on_common_grid(0.001, 0.0, vec![0.0].into(), vec![0.0].into(), 1000)
            .is_err());
    }

    #[test]
    fn params_reject_bad_scalars() {
        let z = || ModeVector::zeros(1);
        assert!(TwoScaleParams::new(0.0, 0.0, z(), z()).is_err());
        assert!(TwoScaleParams::new(0.1, -0.1, z(), z()).is_err());
    }

    #[test]
    fn pure_semigroup_path() {
        let model = ReactionDiffusionParams::degenerate().build().unwrap();
        let mut p = TwoScaleParams::from_model(&model, 0.1, 0.0).unwrap();
        p.x0 = ModeVector::unit(model.n_slow(), 0);
        let bundle = simulate_pair(&model, &p, None, 1, 0).unwrap();
        let a1 = model.slow_op.eigenvalues[0];
        for (t, x) in bundle.times.iter().zip(&bundle.x) {
            assert!((x[0] - (a1 * t).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn clipping_projects_radially() {
        let mut a = vec![3.0, 4.0];
        assert!(clip_to_ball(&mut a, 2.0));
        assert!((norm(&a) - 2.0).abs() < 1e-15);
        assert!((a[0] / a[1] - 0.75).abs() < 1e-15);
        let mut b = vec![0.5];
        assert!(!clip_to_ball(&mut b, 2.0));
    }
}
