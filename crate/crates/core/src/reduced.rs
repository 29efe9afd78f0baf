//! The reduced control problem
//! `min E[h(X_1) - int_0^1 lambda~*(X_s, alpha_s) ds]`,
//! `dX = (AX - alpha) dt + R(X) dW + eta dB`, `|alpha| <= M + 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::ValueEstimate;
use crate::dynamics::{clip_to_ball, run_reduced, AlphaPolicy, HORIZON};
use crate::error::{argument, config, Error, Result};
use crate::legendre::LegendreTable;
use crate::model::{fingerprint_of, ModelSpec};
use crate::spectral::ModeStep;

/// Feedback `alpha(t, x) = c_0(b) + sum_j c_j(b) x_j` on the leading
/// coordinates, with coefficients constant on each of `blocks` time blocks,
/// clipped radially to the ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedPolicy {
    pub dim: usize,
    pub blocks: usize,
    pub n_steps: usize,
    pub radius: f64,
    /// `blocks x dim x (1 + dim)`, row-major.
    pub coef: Vec<f64>,
}

impl ReducedPolicy {
    pub fn zero(dim: usize, blocks: usize, n_steps: usize, radius: f64) -> Result<Self> {
        if dim == 0 || blocks == 0 || blocks > n_steps {
            return Err(config("policy needs a positive dimension and 1..=n_steps time blocks"));
        }
        Ok(Self { dim, blocks, n_steps, radius, coef: vec![0.0; blocks * dim * (1 + dim)] })
    }

    fn block(&self, step: usize) -> usize {
        (step * self.blocks / self.n_steps).min(self.blocks - 1)
    }
}

impl AlphaPolicy for ReducedPolicy {
    fn alpha(&self, step: usize, x: &[f64], out: &mut [f64]) {
        let nf = 1 + self.dim;
        let base = self.block(step) * self.dim * nf;
        for (k, o) in out.iter_mut().enumerate().take(self.dim) {
            let c = &self.coef[base + k * nf..base + (k + 1) * nf];
            *o = c[0] + c[1..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        clip_to_ball(&mut out[..self.dim], self.radius);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReducedSettings {
    pub n_steps: usize,
    pub blocks: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub initial_step: f64,
    pub min_step: f64,
    pub max_evals: usize,
}

impl Default for ReducedSettings {
    fn default() -> Self {
        Self {
            n_steps: 200,
            blocks: 20,
            n_train: 400,
            n_eval: 2000,
            train_seed: 303,
            eval_seed: 404,
            initial_step: 0.5,
            min_step: 1e-3,
            max_evals: 6000,
        }
    }
}

/// Cost samples and how often `x1` left the table range and was clamped.
#[derive(Clone, Debug, PartialEq)]
pub struct CostSamples {
    pub samples: Vec<f64>,
    pub x_clamped: usize,
}

fn clamp_to_grid(table: &LegendreTable, x1: f64) -> (f64, bool) {
    let lo = table.x_grid[0];
    let hi = table.x_grid[table.x_grid.len() - 1];
    if x1 < lo {
        (lo, true)
    } else if x1 > hi {
        (hi, true)
    } else {
        (x1, false)
    }
}

/// `lambda~*` at `(x1, alpha)` with `x1` clamped into the table; a
/// non-finite value means clipping failed.
fn star_at(table: &LegendreTable, x1: f64, alpha: &[f64]) -> Result<(f64, bool)> {
    let (xc, clamped) = clamp_to_grid(table, x1);
    let v = table.eval(xc, alpha)?;
    if !v.is_finite() {
        return Err(Error::Invariant(format!("conjugate is -inf at admissible alpha {alpha:?}")));
    }
    Ok((v, clamped))
}

/// Pathwise `h(X_1) - sum_n dt lambda~*(X_n, alpha_n)`.
#[allow(clippy::too_many_arguments)]
pub fn reduced_cost_samples(
    model: &ModelSpec,
    table: &LegendreTable,
    eta: f64,
    policy: &dyn AlphaPolicy,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<CostSamples> {
    if !(eta >= 0.0) {
        return Err(argument("eta must be nonnegative"));
    }
    if table.active_dim() != model.active_dim {
        return Err(config("conjugate table and model disagree on the active dimension"));
    }
    let dt = HORIZON / n_steps as f64;
    let per_path: Vec<(f64, usize)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut cost = 0.0;
            let mut clamped = 0;
            let mut failure = None;
            run_reduced(model, eta, policy, &model.x0, n_steps, 1, seed, p as u64, |_, x, a| {
                if failure.is_some() {
                    return;
                }
                if a.is_empty() {
                    cost += model.coeffs.h(x);
                    return;
                }
                match star_at(table, x[0], a) {
                    Ok((v, c)) => {
                        cost -= dt * v;
                        clamped += c as usize;
                    }
                    Err(e) => failure = Some(e),
                }
            })?;
            match failure {
                Some(e) => Err(e),
                None => Ok((cost, clamped)),
            }
        })
        .collect::<Result<_>>()?;
    Ok(CostSamples {
        samples: per_path.iter().map(|p| p.0).collect(),
        x_clamped: per_path.iter().map(|p| p.1).sum(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedSolution {
    /// Cost of the best policy on fresh paths.
    pub estimate: ValueEstimate,
    /// Running minimum of the training objective after each pass.
    pub trace: Vec<f64>,
    pub policy: ReducedPolicy,
    pub evaluations: usize,
    pub x_clamped: usize,
}

/// Coordinate search with halving steps over `ReducedPolicy` coefficients,
/// all candidates scored on the same training paths; the winner is
/// re-evaluated on an independent seed.
pub fn solve_reduced(
    model: &ModelSpec,
    table: &LegendreTable,
    eta: f64,
    settings: &ReducedSettings,
) -> Result<ReducedSolution> {
    let s = settings;
    if s.n_train == 0 || s.n_eval == 0 || !(s.min_step > 0.0 && s.initial_step >= s.min_step) {
        return Err(config("reduced search needs paths and 0 < min_step <= initial_step"));
    }
    let deterministic = model.coeffs.r_is_zero() && eta == 0.0;
    let n_train = if deterministic { 1 } else { s.n_train };
    let radius = model.constants.m + 1.0;
    let mut policy = ReducedPolicy::zero(model.active_dim, s.blocks, s.n_steps, radius)?;
    let score = |p: &ReducedPolicy| -> Result<f64> {
        let c = reduced_cost_samples(model, table, eta, p, s.n_steps, n_train, s.train_seed)?;
        Ok(c.samples.iter().sum::<f64>() / c.samples.len() as f64)
    };
    let mut best = score(&policy)?;
    let mut evaluations = 1;
    let mut trace = vec![best];
    let mut step = s.initial_step;
    while step >= s.min_step && evaluations < s.max_evals {
        let mut improved = false;
        for i in 0..policy.coef.len() {
            for dir in [1.0, -1.0] {
                let mut cand = policy.clone();
                cand.coef[i] += dir * step;
                let v = score(&cand)?;
                evaluations += 1;
                if v < best - 1e-12 * (1.0 + best.abs()) {
                    best = v;
                    policy = cand;
                    improved = true;
                    break;
                }
            }
        }
        trace.push(best);
        if !improved {
            step *= 0.5;
        }
    }
    let eval = reduced_cost_samples(model, table, eta, &policy, s.n_steps, s.n_eval, s.eval_seed)?;
    if eval.x_clamped > 0 {
        log::warn!("reduced evaluation clamped x1 into the table range {} times", eval.x_clamped);
    }
    let fp = fingerprint_of(&format!(
        "reduced|{}|{}|{eta}|{settings:?}",
        model.fingerprint(),
        table.fingerprint
    ));
    Ok(ReducedSolution {
        estimate: ValueEstimate::from_samples(&eval.samples, fp),
        trace,
        policy,
        evaluations,
        x_clamped: eval.x_clamped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeterministicSettings {
    pub n_steps: usize,
    pub starts: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for DeterministicSettings {
    fn default() -> Self {
        Self { n_steps: 200, starts: 8, seed: 505, max_iter: 3000, tol: 1e-12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeterministicSolution {
    pub value: f64,
    pub times: Vec<f64>,
    /// Control per step.
    pub alpha: Vec<Vec<f64>>,
    /// State per grid time, terminal included.
    pub x: Vec<Vec<f64>>,
    /// Final objective of every start.
    pub start_values: Vec<f64>,
}

struct Transcription<'a> {
    model: &'a ModelSpec,
    table: &'a LegendreTable,
    steps: Vec<ModeStep>,
    dt: f64,
    n_steps: usize,
    dim: usize,
    radius: f64,
}

const FD_H: f64 = 1e-6;

/// Central difference, one-sided where a side is not finite.
fn slope<F: FnMut(f64) -> f64>(mut f: F, v: f64) -> f64 {
    let (a, b, c) = (f(v - FD_H), f(v), f(v + FD_H));
    match (a.is_finite(), c.is_finite()) {
        (true, true) => (c - a) / (2.0 * FD_H),
        (false, true) => (c - b) / FD_H,
        (true, false) => (b - a) / FD_H,
        _ => 0.0,
    }
}

impl Transcription<'_> {
    fn forward(&self, alpha: &[f64]) -> Vec<Vec<f64>> {
        let mut x = self.model.x0.clone();
        let mut xs = Vec::with_capacity(self.n_steps + 1);
        xs.push(x.clone());
        for n in 0..self.n_steps {
            let a = &alpha[n * self.dim..(n + 1) * self.dim];
            for (k, s) in self.steps.iter().enumerate() {
                let drift = if k < self.dim { -a[k] } else { 0.0 };
                x[k] = s.decay * x[k] + s.drift_weight * drift;
            }
            xs.push(x.clone());
        }
        xs
    }

    fn star(&self, x1: f64, a: &[f64]) -> f64 {
        let xc = clamp_to_grid(self.table, x1).0;
        self.table.eval(xc, a).unwrap_or(f64::NEG_INFINITY)
    }

    fn objective(&self, alpha: &[f64]) -> Result<f64> {
        let xs = self.forward(alpha);
        let mut j = self.model.coeffs.h(&xs[self.n_steps]);
        for n in 0..self.n_steps {
            let (v, _) = star_at(self.table, xs[n][0], &alpha[n * self.dim..(n + 1) * self.dim])?;
            j -= self.dt * v;
        }
        Ok(j)
    }

    /// Adjoint gradient of the objective in the stacked controls.
    fn gradient(&self, alpha: &[f64]) -> Vec<f64> {
        let xs = self.forward(alpha);
        let d = self.dim;
        let ns = self.model.n_slow();
        let mut p = vec![0.0; ns];
        let mut xt = xs[self.n_steps].clone();
        for k in 0..ns {
            let v = xt[k];
            p[k] = slope(
                |t| {
                    xt[k] = t;
                    let h = self.model.coeffs.h(&xt);
                    xt[k] = v;
                    h
                },
                v,
            );
        }
        let mut g = vec![0.0; alpha.len()];
        for n in (0..self.n_steps).rev() {
            let a = &alpha[n * d..(n + 1) * d];
            let mut ab = a.to_vec();
            for k in 0..d {
                let ds = slope(
                    |t| {
                        ab[k] = t;
                        let v = self.star(xs[n][0], &ab);
                        ab[k] = a[k];
                        v
                    },
                    a[k],
                );
                g[n * d + k] = -self.dt * ds - p[k] * self.steps[k].drift_weight;
            }
            let dx = slope(|t| self.star(t, a), xs[n][0]);
            for k in 0..ns {
                p[k] *= self.steps[k].decay;
            }
            p[0] -= self.dt * dx;
        }
        g
    }

    fn project(&self, alpha: &mut [f64]) {
        for a in alpha.chunks_exact_mut(self.dim) {
            clip_to_ball(a, self.radius);
        }
    }

    fn descend(&self, mut alpha: Vec<f64>, s: &DeterministicSettings) -> Result<(f64, Vec<f64>)> {
        self.project(&mut alpha);
        let mut j = self.objective(&alpha)?;
        let mut lr = 1.0;
        for _ in 0..s.max_iter {
            let g = self.gradient(&alpha);
            let mut accepted = false;
            while lr > 1e-14 {
                let mut cand: Vec<f64> = alpha.iter().zip(&g).map(|(a, gi)| a - lr * gi).collect();
                self.project(&mut cand);
                let decrease: f64 = g.iter().zip(alpha.iter().zip(&cand)).map(|(gi, (a, c))| gi * (a - c)).sum();
                let jc = self.objective(&cand)?;
                if jc <= j - 1e-4 * decrease && jc < j {
                    let gain = j - jc;
                    alpha = cand;
                    j = jc;
                    accepted = true;
                    lr *= 2.0;
                    if gain < s.tol * (1.0 + j.abs()) {
                        return Ok((j, alpha));
                    }
                    break;
                }
                lr *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Ok((j, alpha))
    }
}

/// Open-loop controls, piecewise constant on the time grid, optimized by
/// projected gradient with backtracking from several starts. Needs `R = 0`.
pub fn solve_reduced_deterministic(
    model: &ModelSpec,
    table: &LegendreTable,
    settings: &DeterministicSettings,
) -> Result<DeterministicSolution> {
    if !model.coeffs.r_is_zero() {
        return Err(config("deterministic reduction needs R = 0"));
    }
    if table.active_dim() != model.active_dim {
        return Err(config("conjugate table and model disagree on the active dimension"));
    }
    if settings.n_steps == 0 || settings.starts == 0 {
        return Err(config("need at least one step and one start"));
    }
    let dt = HORIZON / settings.n_steps as f64;
    let tr = Transcription {
        model,
        table,
        steps: model.slow_op.eigenvalues.iter().map(|&a| ModeStep::new(a, dt)).collect(),
        dt,
        n_steps: settings.n_steps,
        dim: model.active_dim,
        radius: model.constants.m + 1.0,
    };
    let len = settings.n_steps * tr.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let starts: Vec<Vec<f64>> = (0..settings.starts)
        .map(|i| {
            if i == 0 {
                return vec![0.0; len];
            }
            let level: Vec<f64> = (0..tr.dim).map(|_| rng.random_range(-tr.radius..tr.radius)).collect();
            (0..len)
                .map(|j| level[j % tr.dim] + 0.1 * tr.radius * rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let results: Vec<(f64, Vec<f64>)> = starts
        .into_par_iter()
        .map(|a| tr.descend(a, settings))
        .collect::<Result<_>>()?;
    let start_values: Vec<f64> = results.iter().map(|r| r.0).collect();
    let best = (0..results.len())
        .min_by(|a, b| results[*a].0.partial_cmp(&results[*b].0).unwrap())
        .unwrap();
    let (value, alpha) = results[best].clone();
    let x = tr.forward(&alpha);
    Ok(DeterministicSolution {
        value,
        times: (0..=settings.n_steps).map(|n| n as f64 * dt).collect(),
        alpha: alpha.chunks_exact(tr.dim).map(<[f64]>::to_vec).collect(),
        x,
        start_values,
    })
}

/// Probabilists' Gauss-Hermite rule with five nodes.
const GH_NODES: [f64; 5] = [-2.8569700138728056, -1.3556261799742659, 0.0, 1.3556261799742659, 2.8569700138728056];
const GH_WEIGHTS: [f64; 5] = [
    0.011257411327720691,
    0.2220759220056126,
    0.5333333333333333,
    0.2220759220056126,
    0.011257411327720691,
];

fn interp_clamped(grid: &[f64], vals: &[f64], x: f64) -> f64 {
    let n = grid.len();
    if x <= grid[0] {
        return vals[0];
    }
    if x >= grid[n - 1] {
        return vals[n - 1];
    }
    let i = grid.partition_point(|g| *g <= x) - 1;
    let t = (x - grid[i]) / (grid[i + 1] - grid[i]);
    (1.0 - t) * vals[i] + t * vals[i + 1]
}

/// Backward dynamic programming on a grid of the leading slow coordinate.
///
/// Needs one slow mode, or a problem where the other modes start at zero
/// and nothing moves them (`R = 0`, `eta = 0`, one active dimension).
pub fn dp_oracle(
    model: &ModelSpec,
    table: &LegendreTable,
    eta: f64,
    x_grid: &[f64],
    alpha_grid: &[f64],
    n_steps: usize,
) -> Result<f64> {
    let flat_rest = model.x0[1..].iter().all(|v| *v == 0.0);
    let one_dim = model.n_slow() == 1 || (flat_rest && model.coeffs.r_is_zero() && eta == 0.0);
    if model.active_dim != 1 || !one_dim {
        return Err(config("the grid oracle handles a single effective slow coordinate"));
    }
    if x_grid.len() < 2 || x_grid.windows(2).any(|w| !(w[1] > w[0])) || alpha_grid.is_empty() || n_steps == 0 {
        return Err(config("oracle grids must be increasing with at least two x nodes"));
    }
    let x0 = model.x0[0];
    if x0 < x_grid[0] || x0 > x_grid[x_grid.len() - 1] {
        return Err(config(format!("x0 = {x0} outside the oracle grid")));
    }
    let dt = HORIZON / n_steps as f64;
    let st = ModeStep::new(model.slow_op.eigenvalues[0], dt);
    let radius = model.constants.m + 1.0;
    let alphas: Vec<f64> = alpha_grid.iter().copied().filter(|a| a.abs() <= radius).collect();
    if alphas.is_empty() {
        return Err(config("no alpha node inside the admissible ball"));
    }
    let full = |x1: f64| {
        let mut x = model.x0.clone();
        x[0] = x1;
        x
    };
    let mut rb = vec![0.0; model.n_slow()];
    let sd: Vec<f64> = x_grid
        .iter()
        .map(|&x1| {
            model.coeffs.r(&full(x1), &mut rb);
            st.noise_factor * rb[0].hypot(eta) * dt.sqrt()
        })
        .collect();
    let mut star = vec![0.0; x_grid.len() * alphas.len()];
    for (i, &x1) in x_grid.iter().enumerate() {
        for (j, &a) in alphas.iter().enumerate() {
            star[i * alphas.len() + j] = star_at(table, x1, &[a])?.0;
        }
    }
    let mut v: Vec<f64> = x_grid.iter().map(|&x1| model.coeffs.h(&full(x1))).collect();
    for _ in 0..n_steps {
        let next: Vec<f64> = (0..x_grid.len())
            .into_par_iter()
            .map(|i| {
                let x1 = x_grid[i];
                let mut best = f64::INFINITY;
                for (j, &a) in alphas.iter().enumerate() {
                    let mean = st.decay * x1 - st.drift_weight * a;
                    let ev: f64 = if sd[i] == 0.0 {
                        interp_clamped(x_grid, &v, mean)
                    } else {
                        GH_NODES
                            .iter()
                            .zip(&GH_WEIGHTS)
                            .map(|(z, w)| w * interp_clamped(x_grid, &v, mean + sd[i] * z))
                            .sum()
                    };
                    best = best.min(ev - dt * star[i * alphas.len() + j]);
                }
                best
            })
            .collect();
        v = next;
    }
    Ok(interp_clamped(x_grid, &v, x0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_hermite_moments() {
        let m0: f64 = GH_WEIGHTS.iter().sum();
        let m2: f64 = GH_NODES.iter().zip(&GH_WEIGHTS).map(|(z, w)| w * z * z).sum();
        let m4: f64 = GH_NODES.iter().zip(&GH_WEIGHTS).map(|(z, w)| w * z.powi(4)).sum();
        assert!((m0 - 1.0).abs() < 1e-14);
        assert!((m2 - 1.0).abs() < 1e-13);
        assert!((m4 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn policy_output_is_clipped() {
        let mut p = ReducedPolicy::zero(2, 4, 100, 2.0).unwrap();
        p.coef.iter_mut().for_each(|c| *c = 10.0);
        let mut out = [0.0; 2];
        p.alpha(99, &[1.0, 1.0], &mut out);
        assert!((out[0].hypot(out[1]) - 2.0).abs() < 1e-12);
        assert_eq!(p.block(99), 3);
        assert_eq!(p.block(0), 0);
    }

    #[test]
    fn clamped_interpolation() {
        let g = [0.0, 1.0, 2.0];
        let v = [0.0, 10.0, 0.0];
        assert_eq!(interp_clamped(&g, &v, -1.0), 0.0);
        assert_eq!(interp_clamped(&g, &v, 0.5), 5.0);
        assert_eq!(interp_clamped(&g, &v, 1.0), 10.0);
        assert_eq!(interp_clamped(&g, &v, 3.0), 0.0);
    }
}
