//! Ergodic value `lambda(x, z)` of the frozen fast problem.
//!
//! Stationary feedback policies are generated by policy iteration from
//! Hamiltonian-greedy starting points and each is simulated once under common
//! random numbers, recording its long-run averages of `b` (on the active
//! modes) and `l`. For any `z` the estimate is the best of these affine
//! functions, `min_pi <z, b_pi> + l_pi`, so tables built from one pool are
//! concave and `M`-Lipschitz in `z` by construction.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::ValueEstimate;
use crate::dynamics::{all_finite, Integrator};
use crate::error::{argument, config, Error, Result};
use crate::hamiltonian::psi;
use crate::model::{fingerprint_of, ModelSpec, MAX_MODES};
use crate::regression::{Fit, PolyBasis};
use crate::spectral::{BrownianSource, ModeVector, NoiseStream};
use crate::stats::mean_stderr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErgodicSolver {
    CesaroPolicy,
    GridVi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErgodicSettings {
    /// Averaging window after burn-in.
    pub horizon: f64,
    pub burn_in: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub solver: ErgodicSolver,
    /// Policy-improvement rounds after the greedy start.
    pub rounds: usize,
    /// Degree of the relative-value regression in the fast coordinates.
    pub degree: u32,
    /// Greedy starting points on each active axis; products are used in 2-D.
    pub anchors: Vec<f64>,
    /// Grid points for the value-iteration solver.
    pub vi_points: usize,
}

impl Default for ErgodicSettings {
    fn default() -> Self {
        Self {
            horizon: 6.0,
            burn_in: 2.0,
            dt: 0.01,
            n_paths: 64,
            seed: 11,
            solver: ErgodicSolver::CesaroPolicy,
            rounds: 2,
            degree: 3,
            anchors: vec![-3.0, -1.5, -0.75, -0.35, 0.0, 0.35, 0.75, 1.5, 3.0],
            vi_points: 201,
        }
    }
}

impl ErgodicSettings {
    /// Checks the horizon and burn-in against the mixing rate `mu`.
    pub fn check(&self, mu: f64) -> Result<()> {
        if self.horizon < 10.0 / mu - 1e-12 {
            return Err(argument(format!(
                "horizon {} below 10/mu = {:.4}",
                self.horizon,
                10.0 / mu
            )));
        }
        if self.burn_in < 3.0 / mu - 1e-12 {
            return Err(argument(format!(
                "burn-in {} below 3/mu = {:.4}",
                self.burn_in,
                3.0 / mu
            )));
        }
        if !(self.dt > 0.0) || self.n_paths == 0 {
            return Err(argument("ergodic settings need dt > 0 and at least one path"));
        }
        Ok(())
    }

    fn burn_steps(&self) -> usize {
        (self.burn_in / self.dt).round() as usize
    }

    fn avg_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// Long-run averages of one stationary policy, per simulated path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyAverages {
    /// Per path: averages of the active components of `b`.
    pub b: Vec<Vec<f64>>,
    /// Per path: average of `l`.
    pub l: Vec<f64>,
    pub b_mean: Vec<f64>,
    pub l_mean: f64,
}

impl PolicyAverages {
    fn from_paths(b: Vec<Vec<f64>>, l: Vec<f64>) -> Self {
        let d = b[0].len();
        let n = l.len() as f64;
        let b_mean = (0..d).map(|k| b.iter().map(|v| v[k]).sum::<f64>() / n).collect();
        let l_mean = l.iter().sum::<f64>() / n;
        Self { b, l, b_mean, l_mean }
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        self.l_mean + z.iter().zip(&self.b_mean).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn samples(&self, z: &[f64]) -> Vec<f64> {
        self.b
            .iter()
            .zip(&self.l)
            .map(|(b, l)| l + z.iter().zip(b).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }
}

/// All evaluated policies at one slow node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyPool {
    pub x1: f64,
    pub entries: Vec<PolicyAverages>,
}

impl PolicyPool {
    /// Index of the best policy for `z` (lowest index on ties).
    pub fn best(&self, z: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, e) in self.entries.iter().enumerate() {
            let v = e.value(z);
            if v < best.0 {
                best = (v, i);
            }
        }
        best.1
    }

    pub fn estimate(&self, z: &[f64]) -> (f64, f64) {
        let i = self.best(z);
        let e = &self.entries[i];
        (e.value(z), mean_stderr(&e.samples(z)).1)
    }
}

fn embed(model: &ModelSpec, z_active: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; model.n_slow()];
    z[..z_active.len()].copy_from_slice(z_active);
    z
}

fn leading_node(model: &ModelSpec, x1: f64) -> Vec<f64> {
    let mut x = vec![0.0; model.n_slow()];
    x[0] = x1;
    x
}

/// Stationary feedback for the frozen problem: greedy in `l + z b` plus the
/// gradient of a fitted relative value function pushed through `G rho`.
struct StationaryPolicy<'a> {
    model: &'a ModelSpec,
    x: &'a [f64],
    z: Vec<f64>,
    rel_value: Option<Fit>,
}

impl StationaryPolicy<'_> {
    fn control(&self, q: &[f64]) -> usize {
        let mut vb = [0.0; MAX_MODES];
        let v = &mut vb[..self.model.n_noise];
        if let Some(fit) = &self.rel_value {
            for k in 0..fit.basis.n_vars {
                v[k] = self.model.g[k] * fit.gradient(q, 0, k);
            }
        }
        psi(self.model, self.x, q, &self.z, v).argmin
    }
}

struct PathRecord {
    b_avg: Vec<f64>,
    l_avg: f64,
    /// Post-burn running cost under the training `z`, and the fast
    /// regression variables, one entry per step.
    cost: Vec<f64>,
    vars: Vec<f64>,
}

fn simulate_policy(
    model: &ModelSpec,
    x: &[f64],
    policy: &StationaryPolicy,
    settings: &ErgodicSettings,
    n_vars: usize,
    keep: bool,
) -> Result<Vec<PathRecord>> {
    let burn = settings.burn_steps();
    let avg = settings.avg_steps();
    let d = model.active_dim;
    (0..settings.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut integ = Integrator::frozen(model, settings.dt);
            let mut src = BrownianSource::new(settings.seed, NoiseStream::W2, path as u64, model.n_noise);
            let mut q = vec![0.0; model.n_fast()];
            let mut dw = vec![0.0; model.n_noise];
            let mut b = vec![0.0; model.n_slow()];
            let mut rec = PathRecord {
                b_avg: vec![0.0; d],
                l_avg: 0.0,
                cost: Vec::with_capacity(if keep { avg } else { 0 }),
                vars: Vec::with_capacity(if keep { avg * n_vars } else { 0 }),
            };
            for step in 0..burn + avg {
                let u = policy.control(&q);
                if step >= burn {
                    let uv = &model.controls[u];
                    model.coeffs.b(x, &q, uv, &mut b);
                    let l = model.coeffs.l(x, &q, uv);
                    for k in 0..d {
                        rec.b_avg[k] += b[k];
                    }
                    rec.l_avg += l;
                    if keep {
                        let zb: f64 = policy.z.iter().zip(&b).map(|(a, c)| a * c).sum();
                        rec.cost.push(l + zb);
                        rec.vars.extend_from_slice(&q[..n_vars]);
                    }
                }
                src.fill(step as u64, settings.dt, &mut dw);
                integ.step_frozen(x, &mut q, Some(u), &dw);
                if !all_finite(&q) {
                    return Err(Error::Diverged { step: step + 1, what: "frozen fast path".into() });
                }
            }
            rec.b_avg.iter_mut().for_each(|v| *v /= avg as f64);
            rec.l_avg /= avg as f64;
            Ok(rec)
        })
        .collect()
}

fn fit_relative_value(
    records: &[PathRecord],
    settings: &ErgodicSettings,
    mu: f64,
    n_vars: usize,
    basis: &PolyBasis,
) -> Result<Fit> {
    let avg = settings.avg_steps();
    let window = ((3.0 / mu) / settings.dt).round().max(1.0) as usize;
    let gain = records.iter().flat_map(|r| r.cost.iter()).sum::<f64>()
        / (records.len() * avg) as f64;
    let stride = 5;
    let mut vars = Vec::new();
    let mut target = Vec::new();
    for r in records {
        // prefix sums of the centred cost
        let mut pre = vec![0.0; avg + 1];
        for j in 0..avg {
            pre[j + 1] = pre[j] + (r.cost[j] - gain) * settings.dt;
        }
        let mut n = 0;
        while n + window <= avg {
            vars.extend_from_slice(&r.vars[n * n_vars..(n + 1) * n_vars]);
            target.push(pre[n + window] - pre[n]);
            n += stride;
        }
    }
    Fit::fit(basis, &vars, &[&target], 0)
}

fn ergodic_basis(model: &ModelSpec, degree: u32) -> (usize, PolyBasis) {
    if model.n_fast() == 1 {
        (1, PolyBasis::total_degree(1, degree + 1))
    } else {
        (2, PolyBasis::total_degree(2, degree))
    }
}

/// Policy iteration from the greedy policy at `z_active`; returns the
/// averages of every policy visited.
fn policy_iteration(
    model: &ModelSpec,
    x: &[f64],
    z_active: &[f64],
    settings: &ErgodicSettings,
) -> Result<Vec<PolicyAverages>> {
    let (n_vars, basis) = ergodic_basis(model, settings.degree);
    let mut policy = StationaryPolicy { model, x, z: embed(model, z_active), rel_value: None };
    let mut out = Vec::new();
    for round in 0..=settings.rounds {
        let keep = round < settings.rounds;
        let recs = simulate_policy(model, x, &policy, settings, n_vars, keep)?;
        let next = if keep {
            Some(fit_relative_value(&recs, settings, model.constants.mu, n_vars, &basis)?)
        } else {
            None
        };
        let (b, l): (Vec<_>, Vec<_>) = recs.into_iter().map(|r| (r.b_avg, r.l_avg)).unzip();
        out.push(PolicyAverages::from_paths(b, l));
        if let Some(fit) = next {
            policy.rel_value = Some(fit);
        }
    }
    Ok(out)
}

fn anchor_points(settings: &ErgodicSettings, dim: usize) -> Vec<Vec<f64>> {
    if dim == 1 {
        settings.anchors.iter().map(|a| vec![*a]).collect()
    } else {
        // coarse product on the axis anchors' sign pattern and scale
        let axis: Vec<f64> = {
            let mut a: Vec<f64> = settings
                .anchors
                .iter()
                .cloned()
                .filter(|v| v.abs() <= 1.0 + 1e-12)
                .collect();
            if a.is_empty() {
                a = vec![0.0];
            }
            a
        };
        axis.iter().flat_map(|a| axis.iter().map(move |b| vec![*a, *b])).collect()
    }
}

/// Builds the policy pool at slow node `x1 e1`.
pub fn build_pool(model: &ModelSpec, x1: f64, settings: &ErgodicSettings) -> Result<PolicyPool> {
    settings.check(model.constants.mu)?;
    let x = leading_node(model, x1);
    let mut entries = Vec::new();
    for z in anchor_points(settings, model.active_dim) {
        entries.extend(policy_iteration(model, &x, &z, settings)?);
    }
    Ok(PolicyPool { x1, entries })
}

/// Ergodic value at `(x, z)`; `z` lives on the active slow modes.
pub fn estimate_lambda(
    model: &ModelSpec,
    x: &ModeVector,
    z: &[f64],
    settings: &ErgodicSettings,
) -> Result<ValueEstimate> {
    x.check_dim(model.n_slow(), "x")?;
    if z.len() != model.active_dim {
        return Err(config(format!(
            "z must have {} active coordinates, got {}",
            model.active_dim,
            z.len()
        )));
    }
    let fingerprint = fingerprint_of(&format!(
        "lambda|{}|{:?}|{:?}|{:?}",
        model.ergodic_fingerprint(),
        settings,
        x.coeffs,
        z
    ));
    match settings.solver {
        ErgodicSolver::GridVi => {
            let v = grid_vi(model, x, z, settings.vi_points)?;
            Ok(ValueEstimate { mean: v, stderr: 0.0, n: settings.vi_points, fingerprint })
        }
        ErgodicSolver::CesaroPolicy => {
            settings.check(model.constants.mu)?;
            let pool = PolicyPool { x1: x[0], entries: policy_iteration(model, x, z, settings)? };
            let (mean, stderr) = pool.estimate(z);
            Ok(ValueEstimate { mean, stderr, n: settings.n_paths, fingerprint })
        }
    }
}

/// Relative value iteration on a Markov-chain approximation of the single
/// fast mode, on `[-5 sigma, 5 sigma]` with reflecting ends.
pub fn grid_vi(model: &ModelSpec, x: &[f64], z: &[f64], points: usize) -> Result<f64> {
    if model.n_fast() != 1 {
        return Err(Error::Unsupported(format!(
            "grid value iteration needs one fast mode, model has {}",
            model.n_fast()
        )));
    }
    if points < 3 {
        return Err(argument("value iteration needs at least 3 grid points"));
    }
    let lam = model.fast_op.eigenvalues[0];
    let g = model.g[0];
    let sigma = g.abs() / (-2.0 * lam).sqrt();
    let half = 5.0 * sigma;
    let h = 2.0 * half / (points - 1) as f64;
    let grid: Vec<f64> = (0..points).map(|i| -half + i as f64 * h).collect();
    let zf = embed(model, z);
    let nu = model.n_controls();
    // per (node, control): up rate, down rate, running cost
    let mut up = vec![0.0; points * nu];
    let mut down = vec![0.0; points * nu];
    let mut cost = vec![0.0; points * nu];
    let mut fbuf = [0.0];
    let mut b = vec![0.0; model.n_slow()];
    let diff = g * g / (2.0 * h * h);
    let mut max_rate = 0.0f64;
    for (i, &qv) in grid.iter().enumerate() {
        let q = [qv];
        model.coeffs.f(x, &q, &mut fbuf);
        for (k, u) in model.controls.iter().enumerate() {
            let drift = lam * qv + fbuf[0] + g * model.rho_of(k)[0];
            let mut r_up = diff + drift.max(0.0) / h;
            let mut r_down = diff + (-drift).max(0.0) / h;
            if i + 1 == points {
                r_up = 0.0;
            }
            if i == 0 {
                r_down = 0.0;
            }
            model.coeffs.b(x, &q, u, &mut b);
            let c = model.coeffs.l(x, &q, u) + zf.iter().zip(&b).map(|(a, c)| a * c).sum::<f64>();
            up[i * nu + k] = r_up;
            down[i * nu + k] = r_down;
            cost[i * nu + k] = c;
            max_rate = max_rate.max(r_up + r_down);
        }
    }
    let big = 1.05 * max_rate;
    let mut v = vec![0.0; points];
    let mut next = vec![0.0; points];
    let reference = points / 2;
    for _ in 0..2_000_000 {
        for i in 0..points {
            let mut best = f64::INFINITY;
            for k in 0..nu {
                let j = i * nu + k;
                let stay = 1.0 - (up[j] + down[j]) / big;
                let mut ev = stay * v[i];
                if up[j] > 0.0 {
                    ev += up[j] / big * v[i + 1];
                }
                if down[j] > 0.0 {
                    ev += down[j] / big * v[i - 1];
                }
                best = best.min(cost[j] / big + ev);
            }
            next[i] = best;
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..points {
            let d = next[i] - v[i];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        let shift = next[reference];
        for i in 0..points {
            v[i] = next[i] - shift;
        }
        if hi - lo < 1e-12 {
            return Ok(0.5 * (hi + lo) * big);
        }
    }
    Err(Error::Invariant("relative value iteration did not converge".into()))
}

/// Largest active dimension a table can interpolate over.
pub const MAX_ACTIVE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaMeta {
    pub horizon: f64,
    pub burn_in: f64,
    pub n_paths: usize,
    pub policy_class: String,
    pub fingerprint: String,
}

/// `lambda` on a product grid of the leading slow coordinate and the active
/// `z` axes, values stored row-major with `x` outermost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaTable {
    pub x_grid: Vec<f64>,
    pub z_axes: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub meta: LambdaMeta,
}

/// Pools at every node of an `x` grid; tables on any `z` grid follow
/// without further simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaPools {
    pub pools: Vec<PolicyPool>,
    pub settings: ErgodicSettings,
    pub model_fingerprint: String,
    pub active_dim: usize,
}

pub fn build_pools(model: &ModelSpec, x_grid: &[f64], settings: &ErgodicSettings) -> Result<LambdaPools> {
    if x_grid.is_empty() {
        return Err(config("x grid is empty"));
    }
    if x_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(config("x grid must be strictly increasing"));
    }
    if model.n_slow() > 1 && !model.validate(200, 5).leading_mode_only {
        return Err(Error::Unsupported(
            "tables index the slow state by its leading coordinate, but the frozen problem sees other modes".into(),
        ));
    }
    let pools = x_grid
        .iter()
        .map(|&x1| build_pool(model, x1, settings))
        .collect::<Result<_>>()?;
    Ok(LambdaPools {
        pools,
        settings: settings.clone(),
        model_fingerprint: model.ergodic_fingerprint(),
        active_dim: model.active_dim,
    })
}

impl LambdaPools {
    pub fn x_grid(&self) -> Vec<f64> {
        self.pools.iter().map(|p| p.x1).collect()
    }

    pub fn table(&self, z_axes: &[Vec<f64>]) -> Result<LambdaTable> {
        if z_axes.len() != self.active_dim {
            return Err(config(format!("need {} z axes, got {}", self.active_dim, z_axes.len())));
        }
        if z_axes.len() > MAX_ACTIVE {
            return Err(Error::Unsupported(format!("tables hold at most {MAX_ACTIVE} z axes")));
        }
        for a in z_axes {
            if a.is_empty() || a.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(config("z axes must be nonempty and strictly increasing"));
            }
        }
        let nz: usize = z_axes.iter().map(|a| a.len()).product();
        let mut values = Vec::with_capacity(self.pools.len() * nz);
        let mut stderr = Vec::with_capacity(values.capacity());
        for pool in &self.pools {
            for iz in 0..nz {
                let z = z_point(z_axes, iz);
                let (v, s) = pool.estimate(&z);
                values.push(v);
                stderr.push(s);
            }
        }
        let s = &self.settings;
        Ok(LambdaTable {
            x_grid: self.x_grid(),
            z_axes: z_axes.to_vec(),
            values,
            stderr,
            meta: LambdaMeta {
                horizon: s.horizon,
                burn_in: s.burn_in,
                n_paths: s.n_paths,
                policy_class: format!(
                    "pooled greedy policy iteration: {} anchors x {} rounds, degree {}",
                    s.anchors.len(),
                    s.rounds,
                    s.degree
                ),
                fingerprint: fingerprint_of(&format!("{}|{:?}|{:?}", self.model_fingerprint, s, z_axes)),
            },
        })
    }
}

pub(crate) fn z_point(axes: &[Vec<f64>], mut iz: usize) -> Vec<f64> {
    let mut z = vec![0.0; axes.len()];
    for d in (0..axes.len()).rev() {
        let n = axes[d].len();
        z[d] = axes[d][iz % n];
        iz /= n;
    }
    z
}

pub fn build_lambda_table(
    model: &ModelSpec,
    x_grid: &[f64],
    z_axes: &[Vec<f64>],
    settings: &ErgodicSettings,
) -> Result<LambdaTable> {
    build_pools(model, x_grid, settings)?.table(z_axes)
}

/// Bracketing cell and weight on a sorted axis.
pub(crate) fn locate(axis: &[f64], v: f64) -> Option<(usize, f64)> {
    let n = axis.len();
    if n == 1 {
        return (v == axis[0]).then_some((0, 0.0));
    }
    if !(v >= axis[0] && v <= axis[n - 1]) {
        return None;
    }
    let i = match axis.binary_search_by(|a| a.partial_cmp(&v).unwrap()) {
        Ok(i) => i.min(n - 2),
        Err(i) => i - 1,
    };
    Some((i, (v - axis[i]) / (axis[i + 1] - axis[i])))
}

impl LambdaTable {
    pub fn active_dim(&self) -> usize {
        self.z_axes.len()
    }

    pub fn n_z(&self) -> usize {
        self.z_axes.iter().map(|a| a.len()).product()
    }

    pub fn z_point(&self, iz: usize) -> Vec<f64> {
        z_point(&self.z_axes, iz)
    }

    pub fn index(&self, ix: usize, iz: usize) -> usize {
        ix * self.n_z() + iz
    }

    /// Radius of the largest ball centred at 0 inside the `z` box.
    pub fn z_radius(&self) -> f64 {
        self.z_axes
            .iter()
            .map(|a| (-a[0]).min(a[a.len() - 1]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Multilinear interpolation in `(x1, z)`; queries outside the grid are
    /// rejected.
    pub fn interpolate(&self, x1: f64, z: &[f64]) -> Result<f64> {
        self.interpolate_data(&self.values, x1, z)
    }

    /// Standard errors interpolated like the values.
    pub fn interpolate_stderr(&self, x1: f64, z: &[f64]) -> Result<f64> {
        self.interpolate_data(&self.stderr, x1, z)
    }

    fn interpolate_data(&self, data: &[f64], x1: f64, z: &[f64]) -> Result<f64> {
        if z.len() != self.active_dim() {
            return Err(config("z dimension does not match the table"));
        }
        let out = |what: &str, v: f64| Error::OutOfRange(format!("{what} = {v} outside the table"));
        let (ix, wx) = locate(&self.x_grid, x1).ok_or_else(|| out("x1", x1))?;
        let mut cells = [(0usize, 0.0f64); MAX_ACTIVE];
        for (d, zd) in z.iter().enumerate() {
            cells[d] = locate(&self.z_axes[d], *zd).ok_or_else(|| out("z", *zd))?;
        }
        let dims = 1 + z.len();
        let mut acc = 0.0;
        for corner in 0..(1usize << dims) {
            let mut w = 1.0;
            let bx = corner & 1;
            let cx = ix + bx;
            w *= if bx == 1 { wx } else { 1.0 - wx };
            if w == 0.0 {
                continue;
            }
            let mut iz = 0;
            for d in 0..z.len() {
                let bit = (corner >> (d + 1)) & 1;
                let (i, t) = cells[d];
                w *= if bit == 1 { t } else { 1.0 - t };
                iz = iz * self.z_axes[d].len() + i + bit;
            }
            if w == 0.0 {
                continue;
            }
            acc += w * data[self.index(cx, iz)];
        }
        Ok(acc)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        let axes = serde_json::to_string(&self.z_axes).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "# {meta}").map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "# {axes}").map_err(|e| Error::Format(e.to_string()))?;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["x1".to_string()];
        header.extend((1..=self.active_dim()).map(|d| format!("z{d}")));
        header.extend(["value".into(), "stderr".into()]);
        w.write_record(&header).map_err(crate::dynamics::fmt_err)?;
        for (ix, x) in self.x_grid.iter().enumerate() {
            for iz in 0..self.n_z() {
                let k = self.index(ix, iz);
                let mut row = vec![x.to_string()];
                row.extend(self.z_point(iz).iter().map(|v| v.to_string()));
                row.push(self.values[k].to_string());
                row.push(self.stderr[k].to_string());
                w.write_record(&row).map_err(crate::dynamics::fmt_err)?;
            }
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read_csv<R: BufRead>(mut input: R) -> Result<Self> {
        let ferr = |e: &dyn std::fmt::Display| Error::Format(e.to_string());
        let mut line = String::new();
        let mut header_json = |input: &mut R| -> Result<String> {
            line.clear();
            input.read_line(&mut line).map_err(|e| ferr(&e))?;
            line.trim_end()
                .strip_prefix("# ")
                .map(str::to_string)
                .ok_or_else(|| Error::Format("missing table header comment".into()))
        };
        let meta: LambdaMeta = serde_json::from_str(&header_json(&mut input)?).map_err(|e| ferr(&e))?;
        let z_axes: Vec<Vec<f64>> =
            serde_json::from_str(&header_json(&mut input)?).map_err(|e| ferr(&e))?;
        let d = z_axes.len();
        if d == 0 || d > MAX_ACTIVE {
            return Err(Error::Format(format!("table needs 1..={MAX_ACTIVE} z axes")));
        }
        let mut rdr = csv::Reader::from_reader(input);
        let mut x_grid: Vec<f64> = Vec::new();
        let mut values = Vec::new();
        let mut stderr = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| ferr(&e))?;
            let nums: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| ferr(&e)))
                .collect::<Result<_>>()?;
            if nums.len() != d + 3 {
                return Err(Error::Format("wrong number of columns".into()));
            }
            if x_grid.last() != Some(&nums[0]) {
                x_grid.push(nums[0]);
            }
            values.push(nums[d + 1]);
            stderr.push(nums[d + 2]);
        }
        let t = LambdaTable { x_grid, z_axes, values, stderr, meta };
        if t.values.len() != t.x_grid.len() * t.n_z() {
            return Err(Error::Format("row count does not match the grid".into()));
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    pub passed: bool,
    /// Largest violation beyond the allowed slack (0 when passed).
    pub worst: f64,
    /// Flat cell indices involved in violations, most severe first.
    pub violators: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub properties: Vec<PropertyCheck>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed)
    }

    pub fn property(&self, name: &str) -> Option<&PropertyCheck> {
        self.properties.iter().find(|p| p.name == name)
    }
}

pub(crate) struct Tally {
    worst: f64,
    hits: Vec<(f64, usize)>,
}

impl Tally {
    pub(crate) fn new() -> Self {
        Self { worst: 0.0, hits: Vec::new() }
    }

    pub(crate) fn record(&mut self, excess: f64, cells: &[usize]) {
        if excess > 0.0 {
            self.worst = self.worst.max(excess);
            for c in cells {
                self.hits.push((excess, *c));
            }
        }
    }

    pub(crate) fn finish(mut self, name: &str) -> PropertyCheck {
        self.hits.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut violators = Vec::new();
        for (_, c) in self.hits {
            if !violators.contains(&c) {
                violators.push(c);
            }
        }
        PropertyCheck { name: name.into(), passed: violators.is_empty(), worst: self.worst, violators }
    }
}

fn znorm(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Bound, Lipschitz in `z`, Lipschitz in `x` and concavity in `z`, each with
/// a slack of three standard errors.
pub fn lambda_property_audit(table: &LambdaTable, m: f64, lip: f64) -> AuditReport {
    let nz = table.n_z();
    let zs: Vec<Vec<f64>> = (0..nz).map(|iz| table.z_point(iz)).collect();
    let mut bound = Tally::new();
    let mut lz = Tally::new();
    let mut lx = Tally::new();
    let mut conc = Tally::new();
    let val = |k: usize| table.values[k];
    let se = |k: usize| table.stderr[k];
    for ix in 0..table.x_grid.len() {
        for iz in 0..nz {
            let k = table.index(ix, iz);
            let zn = znorm(&zs[iz]);
            bound.record(val(k).abs() - m * (1.0 + zn) - 3.0 * se(k), &[k]);
            for jz in iz + 1..nz {
                let j = table.index(ix, jz);
                let dz: Vec<f64> = zs[iz].iter().zip(&zs[jz]).map(|(a, b)| a - b).collect();
                let excess = (val(k) - val(j)).abs() - m * znorm(&dz) - 3.0 * (se(k) + se(j));
                lz.record(excess, &[k, j]);
            }
            for jx in ix + 1..table.x_grid.len() {
                let j = table.index(jx, iz);
                let dx = (table.x_grid[jx] - table.x_grid[ix]).abs();
                let excess = (val(k) - val(j)).abs() - lip * (1.0 + zn) * dx - 3.0 * (se(k) + se(j));
                lx.record(excess, &[k, j]);
            }
        }
        // discrete concavity along every axis line
        for (d, axis) in table.z_axes.iter().enumerate() {
            let stride: usize = table.z_axes[d + 1..].iter().map(|a| a.len()).product();
            for iz in 0..nz {
                let pos = (iz / stride) % axis.len();
                if pos == 0 || pos + 1 == axis.len() {
                    continue;
                }
                let (a, b, c) = (
                    table.index(ix, iz - stride),
                    table.index(ix, iz),
                    table.index(ix, iz + stride),
                );
                let (za, zb, zc) = (axis[pos - 1], axis[pos], axis[pos + 1]);
                let w = (zc - zb) / (zc - za);
                let chord = w * val(a) + (1.0 - w) * val(c);
                let slack = 3.0 * se(a).max(se(b)).max(se(c));
                conc.record(chord - val(b) - slack - 1e-12, &[b]);
            }
        }
    }
    AuditReport {
        properties: vec![
            bound.finish("bound"),
            lz.finish("lipschitz_z"),
            lx.finish("lipschitz_x"),
            conc.finish("concavity"),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_table(value: f64) -> LambdaTable {
        let z_axes = vec![vec![-1.0, 0.0, 1.0]];
        LambdaTable {
            x_grid: vec![-1.0, 1.0],
            z_axes,
            values: vec![value; 6],
            stderr: vec![0.0; 6],
            meta: LambdaMeta {
                horizon: 1.0,
                burn_in: 1.0,
                n_paths: 1,
                policy_class: "none".into(),
                fingerprint: "0".into(),
            },
        }
    }

    #[test]
    fn interpolation_rejects_outside() {
        let t = flat_table(0.7);
        assert_eq!(t.interpolate(0.3, &[0.25]).unwrap(), 0.7);
        assert!(matches!(t.interpolate(1.5, &[0.0]), Err(Error::OutOfRange(_))));
        assert!(matches!(t.interpolate(0.0, &[-1.01]), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn locate_endpoints() {
        let a = [0.0, 1.0, 3.0];
        assert_eq!(locate(&a, 3.0), Some((1, 1.0)));
        assert_eq!(locate(&a, 0.0), Some((0, 0.0)));
        assert_eq!(locate(&a, 2.0), Some((1, 0.5)));
        assert_eq!(locate(&a, 3.5), None);
    }

    #[test]
    fn constant_table_audits_clean() {
        let rep = lambda_property_audit(&flat_table(0.4), 1.0, 1.0);
        assert!(rep.passed());
        assert!(rep.properties.iter().all(|p| p.worst == 0.0));
    }

    #[test]
    fn z_point_is_row_major() {
        let axes = vec![vec![0.0, 1.0], vec![10.0, 20.0, 30.0]];
        assert_eq!(z_point(&axes, 4), vec![1.0, 20.0]);
    }
}
