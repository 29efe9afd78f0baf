//! Regression solvers for the regularized and the limit BSDE, and policy
//! based value estimates.
//!
//! Both backward schemes are explicit least-squares Monte Carlo: on an
//! uncontrolled forward cloud, `Y_n = E[Y_{n+1} | X_n, Q_n] + dt * driver`,
//! with each martingale integrand estimated by regressing
//! `(Y_{n+1} - E[Y_{n+1} | .]) dW / dt`. Increments are regenerated from the
//! keyed noise streams instead of being stored.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    run_reduced, run_two_scale, FeedbackPolicy, PathNoise, TwoScaleParams, HORIZON,
};
use crate::ergodic::LambdaTable;
use crate::error::{argument, config, Error, Result};
use crate::hamiltonian::{psi, psi_scaled, CovectorField};
use crate::model::{fingerprint_of, ModelSpec, MAX_MODES};
use crate::regression::{Fit, PolyBasis};
use crate::stats::{mean_stderr, paired_diff};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub fingerprint: String,
}

impl ValueEstimate {
    pub fn from_samples(samples: &[f64], fingerprint: String) -> Self {
        let (mean, stderr) = mean_stderr(samples);
        Self { mean, stderr, n: samples.len(), fingerprint }
    }

    /// Standard error of the difference of two independent estimates.
    pub fn combined_stderr(&self, other: &ValueEstimate) -> f64 {
        self.stderr.hypot(other.stderr)
    }
}

/// Regression variables: the leading `slow_vars` slow and `fast_vars` fast
/// coordinates, total degree at most `degree`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisSpec {
    pub slow_vars: usize,
    pub fast_vars: usize,
    pub degree: u32,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self { slow_vars: 2, fast_vars: 1, degree: 2 }
    }
}

impl BasisSpec {
    fn dims(&self, model: &ModelSpec) -> (usize, usize) {
        (self.slow_vars.min(model.n_slow()), self.fast_vars.min(model.n_fast()))
    }

    pub fn basis(&self, model: &ModelSpec) -> PolyBasis {
        let (s, f) = self.dims(model);
        PolyBasis::total_degree(s + f, self.degree)
    }

    fn extract(&self, model: &ModelSpec, x: &[f64], q: &[f64], out: &mut Vec<f64>) {
        let (s, f) = self.dims(model);
        out.extend_from_slice(&x[..s]);
        out.extend_from_slice(&q[..f]);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BsdeSettings {
    pub n_paths: usize,
    pub seed: u64,
    pub basis: BasisSpec,
    /// Time steps; `None` uses the default resolution for `epsilon`.
    pub n_steps: Option<usize>,
}

impl Default for BsdeSettings {
    fn default() -> Self {
        Self { n_paths: 2000, seed: 17, basis: BasisSpec::default(), n_steps: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BsdeSolution {
    pub y0: ValueEstimate,
    /// `Y` per step and path.
    pub y: Vec<Vec<f64>>,
    /// Path averages of the integrand estimates per step.
    pub z1: Vec<Vec<f64>>,
    pub z2: Vec<Vec<f64>>,
    pub xi: Vec<Vec<f64>>,
    /// Per step: fitted integrand functions of the regression variables.
    pub fits: Vec<StepFit>,
    /// Norms of the rescaled `z` fed to the driver, every step and path.
    pub driver_z_norms: Vec<f64>,
    pub terminal_exact: bool,
    pub basis: String,
    pub n_paths: usize,
    pub epsilon: Option<f64>,
    pub eta: f64,
    basis_spec: BasisSpec,
}

impl BsdeSolution {
    pub fn n_steps(&self) -> usize {
        self.y.len() - 1
    }

    /// Fraction of driver nodes with `|z| <= radius`.
    pub fn containment(&self, radius: f64) -> f64 {
        let inside = self.driver_z_norms.iter().filter(|v| **v <= radius).count();
        inside as f64 / self.driver_z_norms.len().max(1) as f64
    }

    /// Empirical `q`-quantile of the driver `z` norms (nearest rank), 0 when
    /// there are none.
    pub fn driver_z_quantile(&self, q: f64) -> f64 {
        let mut v = self.driver_z_norms.clone();
        if v.is_empty() {
            return 0.0;
        }
        v.sort_by(f64::total_cmp);
        let rank = (q.clamp(0.0, 1.0) * v.len() as f64).ceil() as usize;
        v[rank.saturating_sub(1)]
    }

    /// Fitted `(Z^2, Xi)` as a covector field for greedy feedback.
    pub fn field<'a>(&'a self, model: &'a ModelSpec) -> BsdeField<'a> {
        BsdeField { sol: self, model }
    }
}

/// Integrand functions at one step, one fit per estimated mode; modes past
/// the end of a list are taken as zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepFit {
    pub z1: Vec<Fit>,
    pub z2: Vec<Fit>,
    pub xi: Vec<Fit>,
}

pub struct BsdeField<'a> {
    sol: &'a BsdeSolution,
    model: &'a ModelSpec,
}

impl CovectorField for BsdeField<'_> {
    fn eval(&self, step: usize, x: &[f64], q: &[f64], z2: &mut [f64], v: &mut [f64]) {
        let step = step.min(self.sol.n_steps() - 1);
        let f = &self.sol.fits[step];
        let mut vars = Vec::with_capacity(8);
        self.sol.basis_spec.extract(self.model, x, q, &mut vars);
        z2.fill(0.0);
        v.fill(0.0);
        for (o, fit) in z2.iter_mut().zip(&f.z2) {
            *o = fit.predict(&vars, 0);
        }
        for (o, fit) in v.iter_mut().zip(&f.xi) {
            *o = fit.predict(&vars, 0);
        }
    }
}

fn column_means(rows: &[Vec<f64>], width: usize) -> Vec<f64> {
    let mut m = vec![0.0; width];
    for r in rows {
        for k in 0..width {
            m[k] += r[k];
        }
    }
    m.iter_mut().for_each(|v| *v /= rows.len() as f64);
    m
}

fn check_rates(epsilon: f64, eta: f64) -> Result<()> {
    if !(epsilon > 0.0) || !(eta > 0.0) {
        return Err(argument(format!(
            "the regularized BSDE needs epsilon > 0 and eta > 0, got ({epsilon}, {eta})"
        )));
    }
    Ok(())
}

/// Backward solver for the regularized problem with driver
/// `psi(x, q, Z2 / eta, Xi / sqrt(epsilon))`.
pub fn solve_full_bsde(
    model: &ModelSpec,
    epsilon: f64,
    eta: f64,
    settings: &BsdeSettings,
) -> Result<BsdeSolution> {
    check_rates(epsilon, eta)?;
    solve_full_with(model, epsilon, eta, settings, |x, q, z2, xi| {
        psi_scaled(model, epsilon, eta, x, q, z2, xi).map(|r| r.value)
    })
}

/// Same scheme with the driver supplied by the caller as a function of the
/// raw integrands `(x, q, Z2, Xi)`.
pub fn solve_full_with<D>(
    model: &ModelSpec,
    epsilon: f64,
    eta: f64,
    settings: &BsdeSettings,
    driver: D,
) -> Result<BsdeSolution>
where
    D: Fn(&[f64], &[f64], &[f64], &[f64]) -> Result<f64> + Sync,
{
    check_rates(epsilon, eta)?;
    if settings.n_paths < 2 {
        return Err(config("BSDE solver needs at least two paths"));
    }
    let mut params = TwoScaleParams::from_model(model, epsilon, eta)?;
    if let Some(n) = settings.n_steps {
        params = TwoScaleParams::with_steps(epsilon, eta, n, params.x0, params.q0)?;
    }
    let (ns, nf, nn) = (model.n_slow(), model.n_fast(), model.n_noise);
    let n_steps = params.n_steps;
    let dt = params.dt;
    let width = ns + nf;
    let seed = settings.seed;
    let states: Vec<Vec<f64>> = (0..settings.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut s = Vec::with_capacity((n_steps + 1) * width);
            run_two_scale(model, &params, None, seed, p as u64, false, |v| {
                s.extend_from_slice(v.x);
                s.extend_from_slice(v.q);
            })?;
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let state = |p: usize, n: usize| {
        let o = n * width;
        (&states[p][o..o + ns], &states[p][o + ns..o + width])
    };
    let basis = settings.basis.basis(model);
    let n_paths = settings.n_paths;
    let mut y_next: Vec<f64> = (0..n_paths).map(|p| model.coeffs.h(state(p, n_steps).0)).collect();
    let terminal_exact = (0..n_paths).all(|p| y_next[p] == model.coeffs.h(state(p, n_steps).0));
    let mut ys = vec![Vec::new(); n_steps + 1];
    ys[n_steps] = y_next.clone();
    let mut drive_sum = vec![0.0; n_paths];
    let mut fits = vec![StepFit::default(); n_steps];
    let (mut z1m, mut z2m, mut xim) = (vec![], vec![], vec![]);
    let mut znorms = Vec::with_capacity(n_steps * n_paths);
    let (sv, fv) = settings.basis.dims(model);
    let n_w1 = if model.coeffs.r_is_zero() { 0 } else { sv };
    let n_mults = n_w1 + sv + fv;
    let root_dt = dt.sqrt();
    let start_basis = PolyBasis::total_degree(basis.n_vars, 0);
    for n in (0..n_steps).rev() {
        let mut vars = Vec::with_capacity(n_paths * basis.n_vars);
        for p in 0..n_paths {
            let (x, q) = state(p, n);
            settings.basis.extract(model, x, q, &mut vars);
        }
        // normalized increments: W1 and B on the slow variables, W2 on the fast ones
        let mults: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .flat_map_iter(|p| {
                let mut noise = PathNoise::new(model, seed, p as u64, dt, params.noise_substeps);
                let mut dw1 = vec![0.0; nn];
                let mut dw2 = vec![0.0; nn];
                let mut db = vec![0.0; ns];
                noise.w1(n, &mut dw1);
                noise.w2(n, &mut dw2);
                noise.b(n, &mut db);
                let row: Vec<f64> = dw1[..n_w1]
                    .iter()
                    .chain(&db[..sv])
                    .chain(&dw2[..fv])
                    .map(|w| w / root_dt)
                    .collect();
                row
            })
            .collect();
        let b = if n == 0 { &start_basis } else { &basis };
        let mut fs = Fit::fit_augmented(b, &vars, &mults, n_mults, &y_next, n)?.into_iter();
        let cont_fit = fs.next().unwrap();
        let scale = |f: Fit| f.scaled(1.0 / root_dt);
        let mut step_fit = StepFit::default();
        step_fit.z1 = fs.by_ref().take(n_w1).map(scale).collect();
        step_fit.z2 = fs.by_ref().take(sv).map(scale).collect();
        step_fit.xi = fs.by_ref().take(fv).map(scale).collect();
        let nvb = basis.n_vars;
        let rows: Vec<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let v = &vars[p * nvb..(p + 1) * nvb];
                let eval = |fits: &[Fit], len: usize| {
                    let mut out = vec![0.0; len];
                    for (o, f) in out.iter_mut().zip(fits) {
                        *o = f.predict(v, 0);
                    }
                    out
                };
                (cont_fit.predict(v, 0), eval(&step_fit.z1, nn), eval(&step_fit.z2, ns), eval(&step_fit.xi, nn))
            })
            .collect();
        let drivers: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let (x, q) = state(p, n);
                driver(x, q, &rows[p].2, &rows[p].3)
            })
            .collect::<Result<_>>()?;
        for p in 0..n_paths {
            let zs: f64 = rows[p].2.iter().map(|v| (v / eta).powi(2)).sum();
            znorms.push(zs.sqrt());
            y_next[p] = rows[p].0 + dt * drivers[p];
            drive_sum[p] += dt * drivers[p];
        }
        ys[n] = y_next.clone();
        let mean_of = |k: usize, len: usize| -> Vec<f64> {
            (0..len)
                .map(|j| {
                    rows.iter()
                        .map(|r| match k {
                            1 => r.1[j],
                            2 => r.2[j],
                            _ => r.3[j],
                        })
                        .sum::<f64>()
                        / n_paths as f64
                })
                .collect()
        };
        z1m.push(mean_of(1, nn));
        z2m.push(mean_of(2, ns));
        xim.push(mean_of(3, nn));
        fits[n] = step_fit;
    }
    z1m.reverse();
    z2m.reverse();
    xim.reverse();
    let samples: Vec<f64> = (0..n_paths)
        .map(|p| model.coeffs.h(state(p, n_steps).0) + drive_sum[p])
        .collect();
    let fingerprint = fingerprint_of(&format!(
        "full-bsde|{}|{epsilon}|{eta}|{settings:?}",
        model.fingerprint()
    ));
    Ok(BsdeSolution {
        y0: ValueEstimate::from_samples(&samples, fingerprint),
        y: ys,
        z1: z1m,
        z2: z2m,
        xi: xim,
        fits,
        driver_z_norms: znorms,
        terminal_exact,
        basis: basis.descriptor(),
        n_paths,
        epsilon: Some(epsilon),
        eta,
        basis_spec: settings.basis,
    })
}

/// Backward solver for the limit equation with driver `lambda(X, Z2 / eta)`
/// read from `table`, on the uncontrolled slow cloud.
pub fn solve_limit_bsde(
    model: &ModelSpec,
    eta: f64,
    table: &LambdaTable,
    settings: &BsdeSettings,
) -> Result<BsdeSolution> {
    if !(eta > 0.0) {
        return Err(argument(format!("the limit BSDE needs eta > 0, got {eta}")));
    }
    if table.active_dim() != model.active_dim {
        return Err(config("lambda table and model disagree on the active dimension"));
    }
    solve_limit_with(model, eta, settings, |x1, z| table.interpolate(x1, z))
}

/// Limit scheme with a caller-supplied driver `(x1, z) -> lambda`.
pub fn solve_limit_with<L>(
    model: &ModelSpec,
    eta: f64,
    settings: &BsdeSettings,
    lambda: L,
) -> Result<BsdeSolution>
where
    L: Fn(f64, &[f64]) -> Result<f64> + Sync,
{
    if !(eta > 0.0) {
        return Err(argument(format!("the limit BSDE needs eta > 0, got {eta}")));
    }
    if settings.n_paths < 2 {
        return Err(config("BSDE solver needs at least two paths"));
    }
    let n_steps = settings.n_steps.unwrap_or(200);
    let dt = HORIZON / n_steps as f64;
    let ns = model.n_slow();
    let d = model.active_dim;
    let spec = BasisSpec { fast_vars: 0, ..settings.basis };
    let nv = spec.slow_vars.min(ns);
    let basis = PolyBasis::total_degree(nv, spec.degree);
    let seed = settings.seed;
    let zero = |_: usize, _: &[f64], out: &mut [f64]| out.fill(0.0);
    // per path: nv variables per step, then h(X_1)
    let clouds: Vec<(Vec<f64>, f64)> = (0..settings.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut s = Vec::with_capacity((n_steps + 1) * nv);
            let mut h = 0.0;
            run_reduced(model, eta, &zero, &model.x0, n_steps, 1, seed, p as u64, |n, x, _| {
                s.extend_from_slice(&x[..nv]);
                if n == n_steps {
                    h = model.coeffs.h(x);
                }
            })?;
            Ok((s, h))
        })
        .collect::<Result<_>>()?;
    let n_paths = settings.n_paths;
    let var_at = |p: usize, n: usize| &clouds[p].0[n * nv..(n + 1) * nv];
    let mut y_next: Vec<f64> = clouds.iter().map(|c| c.1).collect();
    let terminal_exact = y_next.iter().zip(&clouds).all(|(y, c)| *y == c.1);
    let mut ys = vec![Vec::new(); n_steps + 1];
    ys[n_steps] = y_next.clone();
    let mut drive_sum = vec![0.0; n_paths];
    let mut fits = vec![StepFit::default(); n_steps];
    let mut z2m = Vec::new();
    let mut znorms = Vec::with_capacity(n_steps * n_paths);
    let n_w1 = if model.coeffs.r_is_zero() { 0 } else { nv };
    let n_mults = n_w1 + d;
    let root_dt = dt.sqrt();
    let start_basis = PolyBasis::total_degree(nv, 0);
    for n in (0..n_steps).rev() {
        let vars: Vec<f64> = (0..n_paths).flat_map(|p| var_at(p, n).to_vec()).collect();
        let mults: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .flat_map_iter(|p| {
                let mut noise = PathNoise::new(model, seed, p as u64, dt, 1);
                let mut dw1 = vec![0.0; model.n_noise];
                let mut db = vec![0.0; ns];
                if n_w1 > 0 {
                    noise.w1(n, &mut dw1);
                }
                noise.b(n, &mut db);
                let row: Vec<f64> = dw1[..n_w1].iter().chain(&db[..d]).map(|w| w / root_dt).collect();
                row
            })
            .collect();
        let b = if n == 0 { &start_basis } else { &basis };
        let mut fs = Fit::fit_augmented(b, &vars, &mults, n_mults, &y_next, n)?.into_iter();
        let cont_fit = fs.next().unwrap();
        let scale = |f: Fit| f.scaled(1.0 / root_dt);
        let step_fit = StepFit {
            z1: fs.by_ref().take(n_w1).map(scale).collect(),
            z2: fs.by_ref().take(d).map(scale).collect(),
            xi: Vec::new(),
        };
        let cont: Vec<f64> = (0..n_paths).map(|p| cont_fit.predict(var_at(p, n), 0)).collect();
        let z_rows: Vec<Vec<f64>> = (0..n_paths)
            .map(|p| step_fit.z2.iter().map(|f| f.predict(var_at(p, n), 0)).collect())
            .collect();
        fits[n] = step_fit;
        let mut outside = 0usize;
        let mut worst = 0.0f64;
        let mut drivers = vec![0.0; n_paths];
        for p in 0..n_paths {
            let z: Vec<f64> = z_rows[p].iter().map(|v| v / eta).collect();
            let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            match lambda(var_at(p, n)[0], &z) {
                Ok(v) => drivers[p] = v,
                Err(Error::OutOfRange(_)) => {
                    outside += 1;
                    worst = worst.max(zn);
                }
                Err(e) => return Err(e),
            }
            znorms.push(zn);
        }
        if outside > 0 {
            return Err(Error::OutOfRange(format!(
                "limit BSDE step {n}: {:.4} of paths ({outside}) query lambda outside the table, largest |z| = {worst:.4}",
                outside as f64 / n_paths as f64
            )));
        }
        for p in 0..n_paths {
            y_next[p] = cont[p] + dt * drivers[p];
            drive_sum[p] += dt * drivers[p];
        }
        ys[n] = y_next.clone();
        z2m.push(column_means(&z_rows, d));
    }
    z2m.reverse();
    let samples: Vec<f64> = (0..n_paths).map(|p| clouds[p].1 + drive_sum[p]).collect();
    let fingerprint = fingerprint_of(&format!("limit-bsde|{}|{eta}|{settings:?}", model.fingerprint()));
    Ok(BsdeSolution {
        y0: ValueEstimate::from_samples(&samples, fingerprint),
        y: ys,
        z1: Vec::new(),
        z2: z2m,
        xi: Vec::new(),
        fits,
        driver_z_norms: znorms,
        terminal_exact,
        basis: basis.descriptor(),
        n_paths,
        epsilon: None,
        eta,
        basis_spec: spec,
    })
}

/// Pathwise cost samples `int l dt + h(X_1)` of a feedback policy. With
/// `eta > 0` each sample averages an antithetic pair in the regularizing
/// noise; all other noise is shared between the pair.
pub fn policy_cost_samples(
    model: &ModelSpec,
    params: &TwoScaleParams,
    policy: &dyn FeedbackPolicy,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    params.validate(model)?;
    let dt = params.dt;
    let one = |path: u64, flip: bool| -> Result<f64> {
        let mut cost = 0.0;
        run_two_scale(model, params, Some(policy), seed, path, flip, |v| match v.u {
            Some(u) => cost += model.coeffs.l(v.x, v.q, &model.controls[u]) * dt,
            None => cost += model.coeffs.h(v.x),
        })?;
        Ok(cost)
    };
    (0..n_samples)
        .into_par_iter()
        .map(|p| {
            let a = one(p as u64, false)?;
            if params.eta > 0.0 {
                Ok(0.5 * (a + one(p as u64, true)?))
            } else {
                Ok(a)
            }
        })
        .collect()
}

pub fn value_by_policy(
    model: &ModelSpec,
    params: &TwoScaleParams,
    policy: &dyn FeedbackPolicy,
    n_samples: usize,
    seed: u64,
) -> Result<ValueEstimate> {
    let samples = policy_cost_samples(model, params, policy, n_samples, seed)?;
    let fingerprint = fingerprint_of(&format!(
        "policy|{}|{:?}|{n_samples}|{seed}",
        model.fingerprint(),
        params
    ));
    Ok(ValueEstimate::from_samples(&samples, fingerprint))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySearchSettings {
    pub n_train: usize,
    pub n_eval: usize,
    pub rounds: usize,
    pub degree: u32,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub ridge: f64,
    /// Fine grid on which all noise is generated; coarser grids aggregate it.
    pub base_steps: usize,
    /// Window of the fast-gradient target, in units of `epsilon / mu`.
    pub window: f64,
}

impl Default for PolicySearchSettings {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_eval: 1000,
            rounds: 2,
            degree: 3,
            train_seed: 101,
            eval_seed: 202,
            ridge: 1e-8,
            base_steps: 1000,
            window: 4.0,
        }
    }
}

impl PolicySearchSettings {
    pub fn params(&self, model: &ModelSpec, epsilon: f64, eta: f64) -> Result<TwoScaleParams> {
        TwoScaleParams::on_common_grid(
            epsilon,
            eta,
            model.x0.clone().into(),
            model.q0.clone().into(),
            self.base_steps,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StepFits {
    value: Fit,
    window: Fit,
}

/// Greedy feedback built from regressions of the cost-to-go (slow gradient)
/// and of a short-window cost (fast gradient) along a simulated cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedPolicy {
    pub epsilon: f64,
    pub eta_trained: f64,
    pub round: usize,
    n_steps: usize,
    slow_vars: usize,
    fast_vars: usize,
    fits: Vec<StepFits>,
}

impl TrainedPolicy {
    /// Myopic start: `argmin_u l(x, q, u)`.
    pub fn myopic(epsilon: f64, n_steps: usize) -> Self {
        Self { epsilon, eta_trained: 0.0, round: 0, n_steps, slow_vars: 0, fast_vars: 0, fits: Vec::new() }
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
}

fn policy_vars(model: &ModelSpec) -> (usize, usize) {
    (model.active_dim, 1.min(model.n_fast()))
}

pub struct BoundPolicy<'a> {
    pub model: &'a ModelSpec,
    pub policy: &'a TrainedPolicy,
}

impl FeedbackPolicy for BoundPolicy<'_> {
    fn control(&self, step: usize, x: &[f64], q: &[f64]) -> usize {
        let m = self.model;
        let p = self.policy;
        let mut zb = [0.0; MAX_MODES];
        let mut vb = [0.0; MAX_MODES];
        let z = &mut zb[..m.n_slow()];
        let v = &mut vb[..m.n_noise];
        if !p.fits.is_empty() {
            let f = &p.fits[step.min(p.fits.len() - 1)];
            let mut vars = [0.0; 8];
            let nv = p.slow_vars + p.fast_vars;
            vars[..p.slow_vars].copy_from_slice(&x[..p.slow_vars]);
            vars[p.slow_vars..nv].copy_from_slice(&q[..p.fast_vars]);
            for k in 0..p.slow_vars {
                z[k] = f.value.gradient(&vars[..nv], 0, k);
            }
            for k in 0..p.fast_vars {
                v[k] = m.g[k] * f.window.gradient(&vars[..nv], 0, p.slow_vars + k) / p.epsilon;
            }
        }
        psi(m, x, q, z, v).argmin
    }
}

struct TrainPath {
    vars: Vec<f64>,
    l: Vec<f64>,
    b: Vec<f64>,
    h: f64,
}

fn improve(
    model: &ModelSpec,
    params: &TwoScaleParams,
    current: &TrainedPolicy,
    settings: &PolicySearchSettings,
    round: usize,
) -> Result<TrainedPolicy> {
    let (sv, fv) = policy_vars(model);
    let nv = sv + fv;
    let d = model.active_dim;
    let n_steps = params.n_steps;
    let dt = params.dt;
    let bound = BoundPolicy { model, policy: current };
    let paths: Vec<TrainPath> = (0..settings.n_train)
        .into_par_iter()
        .map(|p| {
            let mut tp = TrainPath {
                vars: Vec::with_capacity(n_steps * nv),
                l: Vec::with_capacity(n_steps),
                b: Vec::with_capacity(n_steps * d),
                h: 0.0,
            };
            let mut b = vec![0.0; model.n_slow()];
            run_two_scale(model, params, Some(&bound), settings.train_seed, p as u64, false, |v| {
                match v.u {
                    Some(u) => {
                        let uv = &model.controls[u];
                        tp.vars.extend_from_slice(&v.x[..sv]);
                        tp.vars.extend_from_slice(&v.q[..fv]);
                        tp.l.push(model.coeffs.l(v.x, v.q, uv));
                        model.coeffs.b(v.x, v.q, uv, &mut b);
                        tp.b.extend_from_slice(&b[..d]);
                    }
                    None => tp.h = model.coeffs.h(v.x),
                }
            })?;
            Ok(tp)
        })
        .collect::<Result<_>>()?;
    let basis = PolyBasis::total_degree(nv, settings.degree);
    let n = paths.len();
    // cost-to-go per path and step
    let ctg: Vec<Vec<f64>> = paths
        .iter()
        .map(|tp| {
            let mut c = vec![0.0; n_steps];
            let mut acc = tp.h;
            for j in (0..n_steps).rev() {
                acc += tp.l[j] * dt;
                c[j] = acc;
            }
            c
        })
        .collect();
    let value_fits: Vec<Fit> = (1..n_steps)
        .into_par_iter()
        .map(|j| {
            let vars: Vec<f64> = paths.iter().flat_map(|tp| tp.vars[j * nv..(j + 1) * nv].to_vec()).collect();
            let y: Vec<f64> = ctg.iter().map(|c| c[j]).collect();
            Fit::fit_ridge(&basis, &vars, &[&y], j, settings.ridge)
        })
        .collect::<Result<_>>()?;
    let value_at = |j: usize| &value_fits[j.max(1) - 1];
    let window = ((settings.window * params.epsilon / model.constants.mu) / dt).ceil().max(1.0) as usize;
    // running cost plus slow-gradient pairing, per path and step
    let paired: Vec<Vec<f64>> = paths
        .par_iter()
        .map(|tp| {
            (0..n_steps)
                .map(|j| {
                    let vars = &tp.vars[j * nv..(j + 1) * nv];
                    let f = value_at(j);
                    let zb: f64 = (0..d).map(|k| f.gradient(vars, 0, k) * tp.b[j * d + k]).sum();
                    (tp.l[j] + zb) * dt
                })
                .collect()
        })
        .collect();
    let window_fits: Vec<Fit> = (1..n_steps)
        .into_par_iter()
        .map(|j| {
            let end = (j + window).min(n_steps);
            let vars: Vec<f64> = paths.iter().flat_map(|tp| tp.vars[j * nv..(j + 1) * nv].to_vec()).collect();
            let y: Vec<f64> = paired.iter().map(|c| c[j..end].iter().sum()).collect();
            Fit::fit_ridge(&basis, &vars, &[&y], j, settings.ridge)
        })
        .collect::<Result<_>>()?;
    let mut fits = Vec::with_capacity(n_steps);
    for j in 0..n_steps {
        let k = j.max(1) - 1;
        fits.push(StepFits { value: value_fits[k].clone(), window: window_fits[k].clone() });
    }
    debug_assert_eq!(n, settings.n_train);
    Ok(TrainedPolicy {
        epsilon: params.epsilon,
        eta_trained: params.eta,
        round,
        n_steps,
        slow_vars: sv,
        fast_vars: fv,
        fits,
    })
}

/// The myopic policy followed by `rounds` improvements trained at
/// `(epsilon, eta)`.
pub fn train_policies(
    model: &ModelSpec,
    epsilon: f64,
    eta: f64,
    settings: &PolicySearchSettings,
) -> Result<Vec<TrainedPolicy>> {
    let params = settings.params(model, epsilon, eta)?;
    let mut out = vec![TrainedPolicy::myopic(epsilon, params.n_steps)];
    for r in 1..=settings.rounds {
        let next = improve(model, &params, out.last().unwrap(), settings, r)?;
        out.push(next);
    }
    Ok(out)
}

/// Evaluation samples of a trained policy at `(epsilon, eta)` on the
/// evaluation seed.
pub fn evaluate_policy(
    model: &ModelSpec,
    policy: &TrainedPolicy,
    epsilon: f64,
    eta: f64,
    settings: &PolicySearchSettings,
) -> Result<Vec<f64>> {
    let params = settings.params(model, epsilon, eta)?;
    if params.n_steps != policy.n_steps {
        return Err(config(format!(
            "policy trained on {} steps evaluated on {}",
            policy.n_steps, params.n_steps
        )));
    }
    policy_cost_samples(model, &params, &BoundPolicy { model, policy }, settings.n_eval, settings.eval_seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySearchResult {
    pub estimate: ValueEstimate,
    pub per_round: Vec<ValueEstimate>,
    pub best_round: usize,
    /// Evaluation samples of the best policy, for paired comparisons.
    pub best_samples: Vec<f64>,
}

/// Minimum over the policy-improvement sequence of the evaluated cost.
/// `eta = 0` gives the unregularized value.
#[allow(non_snake_case)]
pub fn estimate_V(
    model: &ModelSpec,
    epsilon: f64,
    eta: f64,
    settings: &PolicySearchSettings,
) -> Result<PolicySearchResult> {
    if !(eta >= 0.0) {
        return Err(argument("eta must be nonnegative"));
    }
    let policies = train_policies(model, epsilon, eta, settings)?;
    let fp = fingerprint_of(&format!("V|{}|{epsilon}|{eta}|{settings:?}", model.fingerprint()));
    let samples: Vec<Vec<f64>> = policies
        .iter()
        .map(|p| evaluate_policy(model, p, epsilon, eta, settings))
        .collect::<Result<_>>()?;
    Ok(best_of(samples, fp))
}

fn best_of(samples: Vec<Vec<f64>>, fingerprint: String) -> PolicySearchResult {
    let per_round: Vec<ValueEstimate> =
        samples.iter().map(|s| ValueEstimate::from_samples(s, fingerprint.clone())).collect();
    let best_round = (0..per_round.len())
        .min_by(|a, b| per_round[*a].mean.partial_cmp(&per_round[*b].mean).unwrap())
        .unwrap();
    PolicySearchResult {
        estimate: per_round[best_round].clone(),
        per_round,
        best_round,
        best_samples: samples.into_iter().nth(best_round).unwrap(),
    }
}

/// Policies trained at one `epsilon` and several `eta`, pooled: the
/// improvement sequences share their myopic start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyBank {
    pub epsilon: f64,
    pub trained_at: Vec<f64>,
    pub policies: Vec<TrainedPolicy>,
}

impl PolicyBank {
    pub fn train(model: &ModelSpec, epsilon: f64, etas: &[f64], settings: &PolicySearchSettings) -> Result<Self> {
        if etas.is_empty() || etas.iter().any(|e| !(*e >= 0.0)) {
            return Err(argument("need at least one nonnegative eta"));
        }
        let mut policies = Vec::new();
        for &eta in etas {
            let trained = train_policies(model, epsilon, eta, settings)?;
            let skip = usize::from(!policies.is_empty());
            policies.extend(trained.into_iter().skip(skip));
        }
        Ok(Self { epsilon, trained_at: etas.to_vec(), policies })
    }

    /// Every pooled policy evaluated at `eta` on the evaluation seed; the
    /// estimate is the best of them. `per_round` indexes the pool.
    pub fn evaluate(&self, model: &ModelSpec, eta: f64, settings: &PolicySearchSettings) -> Result<PolicySearchResult> {
        let fp = fingerprint_of(&format!(
            "Vbank|{}|{}|{eta}|{:?}|{settings:?}",
            model.fingerprint(),
            self.epsilon,
            self.trained_at
        ));
        let samples: Vec<Vec<f64>> = self
            .policies
            .iter()
            .map(|p| evaluate_policy(model, p, self.epsilon, eta, settings))
            .collect::<Result<_>>()?;
        Ok(best_of(samples, fp))
    }

    /// Central difference in the leading coordinate of `x0` of the best
    /// cost among the pooled policies `candidates`, on common paths:
    /// `(slope, stderr)`.
    pub fn x0_slope(
        &self,
        model: &ModelSpec,
        eta: f64,
        delta: f64,
        candidates: &[usize],
        settings: &PolicySearchSettings,
    ) -> Result<(f64, f64)> {
        if !(delta > 0.0) {
            return Err(argument("delta must be positive"));
        }
        if candidates.is_empty() || candidates.iter().any(|i| *i >= self.policies.len()) {
            return Err(argument("candidates must index the pool"));
        }
        let shifted = |s: f64| -> Result<Vec<f64>> {
            let mut x0 = model.x0.clone();
            x0[0] += s;
            let m = model.with_initial_state(x0, model.q0.clone())?;
            let samples: Vec<Vec<f64>> = candidates
                .iter()
                .map(|&i| evaluate_policy(&m, &self.policies[i], self.epsilon, eta, settings))
                .collect::<Result<_>>()?;
            Ok(best_of(samples, String::new()).best_samples)
        };
        let (d, se) = paired_diff(&shifted(delta)?, &shifted(-delta)?);
        Ok((d / (2.0 * delta), se / (2.0 * delta)))
    }
}

impl PolicySearchResult {
    /// Indices of the `k` lowest evaluated means.
    pub fn leading(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.per_round.len()).collect();
        idx.sort_by(|a, b| self.per_round[*a].mean.partial_cmp(&self.per_round[*b].mean).unwrap());
        idx.truncate(k.max(1));
        idx
    }
}

/// Policy search at every `eta` of a grid over one [`PolicyBank`], so that
/// differences across `eta` carry no training noise.
#[allow(non_snake_case)]
pub fn estimate_V_pooled(
    model: &ModelSpec,
    epsilon: f64,
    etas: &[f64],
    settings: &PolicySearchSettings,
) -> Result<Vec<PolicySearchResult>> {
    let bank = PolicyBank::train(model, epsilon, etas, settings)?;
    etas.iter().map(|&eta| bank.evaluate(model, eta, settings)).collect()
}
