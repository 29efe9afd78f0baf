//! One runner per subcommand. Each returns a [`SweepResult`] whose checks
//! decide the exit code.

use std::fs;
use std::time::Instant;

use anyhow::{Context as _, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twoscale_core::bsde::{
    estimate_V, solve_full_bsde, value_by_policy, PolicyBank, ValueEstimate,
};
use twoscale_core::dynamics::{
    contraction_slope, moment_report, replay, simulate_pair, FeedbackPolicy, TwoScaleParams,
};
use twoscale_core::ergodic::{estimate_lambda, lambda_property_audit, ErgodicSolver};
use twoscale_core::hamiltonian::greedy_policy;
use twoscale_core::legendre::{fenchel_round_trip, legendre_property_audit, LegendreTable};
use twoscale_core::model::fingerprint_of;
use twoscale_core::reduced::{
    dp_oracle, reduced_cost_samples, solve_reduced, solve_reduced_deterministic, ReducedPolicy,
};
use twoscale_core::spectral::ModeVector;
use twoscale_core::stats::{fit_loglog, paired_diff};

use crate::config::linspace;
use crate::pipeline::Context;
use crate::report::{Check, Plot, Row, Slope, SweepResult};

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn combined(a: &ValueEstimate, b: &ValueEstimate) -> f64 {
    a.combined_stderr(b)
}

/// `max / min - 1` of the magnitudes; infinite when one of them vanishes.
pub fn relative_spread(values: &[f64]) -> f64 {
    let mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().cloned().fold(0.0, f64::max);
    if lo > 0.0 {
        hi / lo - 1.0
    } else {
        f64::INFINITY
    }
}

pub fn run_validate(ctx: &Context) -> Result<SweepResult> {
    let mut out = SweepResult::new("validate");
    let rep = ctx.model.validate(2000, ctx.seeded.simulate_seed);
    for c in &rep.checks {
        out.checks.push(Check { name: c.name.clone(), passed: c.passed, observed: c.observed, limit: c.limit, detail: String::new() });
    }
    out.checks.push(Check::at_least(
        "dissipativity_margin",
        rep.dissipativity_margin,
        -1e-9,
        format!("mu = {}", ctx.model.constants.mu),
    ));
    let n_paths = ctx.cfg.simulate.n_paths;
    let mut second = Vec::new();
    for &eps in &ctx.cfg.epsilon_grid {
        for &eta in &ctx.cfg.eta_grid {
            let t = Instant::now();
            let params = TwoScaleParams::from_model(&ctx.model, eps, eta)?;
            let m = moment_report(&ctx.model, &params, None, n_paths, ctx.seeded.simulate_seed)?;
            let fp = fingerprint_of(&format!("moments|{}|{eps}|{eta}|{n_paths}", ctx.model.fingerprint()));
            for r in &m.rows {
                let x = ValueEstimate { mean: r.sup_x, stderr: r.sup_x_stderr, n: n_paths, fingerprint: fp.clone() };
                let q = ValueEstimate { mean: r.sup_q, stderr: r.sup_q_stderr, n: n_paths, fingerprint: fp.clone() };
                out.rows.push(Row::new(Some(eps), Some(eta), format!("E_sup_x^{}", r.p), &x, secs(t)));
                out.rows.push(Row::new(Some(eps), Some(eta), format!("sup_E_q^{}", r.p), &q, secs(t)));
            }
            second.push(m.row(2).map_or(f64::NAN, |r| r.sup_x));
        }
    }
    let lo = second.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = second.iter().cloned().fold(0.0, f64::max);
    out.checks.push(Check::at_most("moment_uniformity", hi / lo, 2.0, "max/min of E sup|X|^2 over the grid"));
    Ok(out)
}

/// Paths, replay, semigroup and fast contraction. Returns the first path as
/// CSV text alongside the result.
pub fn run_simulate(ctx: &Context) -> Result<(SweepResult, String)> {
    let sc = &ctx.cfg.simulate;
    let model = &ctx.model;
    let seed = ctx.seeded.simulate_seed;
    let mut out = SweepResult::new("simulate");
    let params = TwoScaleParams::from_model(model, sc.epsilon, sc.eta)?;
    let bundle = simulate_pair(model, &params, None, seed, 0)?;
    let mut csv = Vec::new();
    bundle.write_csv(&mut csv)?;
    let again = replay(model, &bundle)?;
    let exact = again.x.iter().flatten().zip(bundle.x.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits())
        && again.q.iter().flatten().zip(bundle.q.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits());
    out.checks.push(Check::flag("replay_bit_exact", exact, "stored increments reproduce the path"));
    let rerun = simulate_pair(model, &params, None, seed, 0)?;
    out.checks.push(Check::flag("rerun_identical", rerun == bundle, "same seed and path id"));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for op in [&model.slow_op, &model.fast_op] {
        for _ in 0..50 {
            let v = ModeVector::new((0..op.dim()).map(|_| rng.random_range(-1.0..1.0)).collect());
            let (s, t) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let two = op.apply(s, &op.apply(t, &v)?)?;
            let one = op.apply(s + t, &v)?;
            for (a, b) in two.iter().zip(one.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    out.checks.push(Check::at_most("semigroup", worst, 1e-12, "|S(s)S(t)v - S(s+t)v| on random inputs"));

    let mu = model.constants.mu;
    let cparams = TwoScaleParams::from_model(model, sc.epsilon, 0.0)?;
    let mut q_alt = model.q0.clone();
    q_alt[0] += 1.0;
    let q_alt = ModeVector::new(q_alt);
    let slopes: Vec<f64> = (0..20)
        .map(|p| contraction_slope(model, &cparams, &q_alt, 5.0 * sc.epsilon, seed, p))
        .collect::<twoscale_core::Result<_>>()?;
    let slope = slopes.iter().sum::<f64>() / slopes.len() as f64;
    let target = -mu / sc.epsilon;
    out.checks.push(Check::at_most(
        "fast_contraction",
        slope,
        (1.0 - sc.contraction_tol) * target,
        format!("log-distance slope over [0, 5 eps] against -mu/eps = {target:.4}"),
    ));
    out.plots.push(Plot {
        name: "contraction".into(),
        x_label: "path".into(),
        y_label: "slope".into(),
        points: slopes.iter().enumerate().map(|(i, s)| (i as f64, *s, 0.0)).collect(),
    });
    Ok((out, String::from_utf8(csv)?))
}

/// Property audit of the coarse table; with one fast mode, the Monte Carlo
/// estimate against value iteration as well.
pub fn run_lambda(ctx: &Context) -> Result<SweepResult> {
    let model = &ctx.model;
    let mut out = SweepResult::new("lambda");
    let t = Instant::now();
    let table = ctx.audit_table()?;
    let audit = lambda_property_audit(&table, model.constants.m, model.constants.lip);
    let elapsed = secs(t);
    for p in &audit.properties {
        out.checks.push(Check {
            name: format!("lambda_{}", p.name),
            passed: p.passed,
            observed: p.worst,
            limit: 0.0,
            detail: format!("violation beyond 3 stderr; {} cells flagged", p.violators.len()),
        });
    }
    for iz in 0..table.n_z() {
        for (ix, x) in table.x_grid.iter().enumerate() {
            let k = table.index(ix, iz);
            let z = table.z_point(iz);
            let est = ValueEstimate {
                mean: table.values[k],
                stderr: table.stderr[k],
                n: table.meta.n_paths,
                fingerprint: table.meta.fingerprint.clone(),
            };
            out.rows.push(Row::new(None, None, format!("lambda(x1={x},z={z:?})"), &est, elapsed));
        }
    }
    if model.n_fast() == 1 && model.active_dim == 1 {
        let mut worst = 0.0f64;
        for (x1, z) in [(0.0, 0.0), (1.0, 1.0), (-1.0, -1.5)] {
            let mut x = vec![0.0; model.n_slow()];
            x[0] = x1;
            let x = ModeVector::new(x);
            let mc = estimate_lambda(model, &x, &[z], &ctx.seeded.ergodic)?;
            let vi_settings = twoscale_core::ergodic::ErgodicSettings { solver: ErgodicSolver::GridVi, ..ctx.seeded.ergodic.clone() };
            let vi = estimate_lambda(model, &x, &[z], &vi_settings)?;
            worst = worst.max((mc.mean - vi.mean).abs() - 3.0 * mc.stderr);
            out.rows.push(Row::new(None, None, format!("cesaro(x1={x1},z={z})"), &mc, 0.0));
            out.rows.push(Row::new(None, None, format!("grid_vi(x1={x1},z={z})"), &vi, 0.0));
        }
        out.checks.push(Check::at_most("lambda_vs_value_iteration", worst, 0.02, "|cesaro - vi| - 3 stderr"));
    }
    Ok(out)
}

/// Truncation, conjugate table, round trip and conjugate audit.
pub fn run_legendre(ctx: &Context) -> Result<(SweepResult, LegendreTable)> {
    let mut out = SweepResult::new("legendre");
    let pools = ctx.pools()?;
    let table = ctx.lambda_table(&pools)?;
    let params = ctx.truncation(&table)?;
    let t = Instant::now();
    let leg = ctx.legendre_table(&table, &params)?;
    let build_s = secs(t);
    let stderr = |x: &[f64], z: &[f64]| table.interpolate_stderr(x[0], z);
    let rt = fenchel_round_trip(&table, &stderr, &leg, ctx.cfg.legendre.round_trip_tol)?;
    out.checks.push(Check::at_most(
        "fenchel_round_trip",
        rt.worst_excess,
        0.0,
        format!(
            "worst gap {:.4} over {} points, tolerance {} + 3 stderr",
            rt.worst_gap, rt.points, ctx.cfg.legendre.round_trip_tol
        ),
    ));
    let mut inside = f64::INFINITY;
    for eta in ctx.cfg.positive_etas() {
        let sol = ctx.limit_bsde(&table, eta, 0.0)?;
        inside = inside.min(sol.containment(params.identity_radius()));
    }
    if inside.is_finite() {
        out.checks.push(Check::at_least(
            "kappa_containment",
            inside,
            0.99,
            format!("fraction of |Z/eta| driver nodes within {:.4}, worst over eta", params.identity_radius()),
        ));
    }
    let c = &ctx.model.constants;
    let lip_tilde = c.lip * (1.0 + params.kappa + params.m);
    for p in legendre_property_audit(&leg, lip_tilde).properties {
        out.checks.push(Check {
            name: format!("conjugate_{}", p.name),
            passed: p.passed,
            observed: p.worst,
            limit: 0.0,
            detail: format!("{} cells flagged", p.violators.len()),
        });
    }
    let fp = ValueEstimate { mean: params.kappa, stderr: 0.0, n: 1, fingerprint: leg.fingerprint.clone() };
    out.rows.push(Row::new(None, None, "kappa", &fp, build_s));
    let a = ValueEstimate { mean: params.a, ..fp.clone() };
    out.rows.push(Row::new(None, None, "gradient_bound_a", &a, build_s));
    Ok((out, leg))
}

/// Random piecewise-constant feedback on time blocks and sign cells of
/// `(x1, q1)`.
struct RandomPolicy {
    n_steps: usize,
    choice: Vec<usize>,
}

const BLOCKS: usize = 10;

impl RandomPolicy {
    fn new(rng: &mut ChaCha8Rng, n_controls: usize, n_steps: usize) -> Self {
        Self { n_steps, choice: (0..BLOCKS * 9).map(|_| rng.random_range(0..n_controls)).collect() }
    }
}

impl FeedbackPolicy for RandomPolicy {
    fn control(&self, step: usize, x: &[f64], q: &[f64]) -> usize {
        let b = (step * BLOCKS / self.n_steps).min(BLOCKS - 1);
        let cell = |v: f64| if v < -0.5 { 0 } else if v > 0.5 { 2 } else { 1 };
        self.choice[b * 9 + cell(x[0]) * 3 + cell(q[0])]
    }
}

/// Limit BSDE over the positive `eta` grid; regularized BSDE, its greedy
/// policy and the sandwich over random policies at the smallest `epsilon`
/// and the largest `eta`.
pub fn run_bsde(ctx: &Context) -> Result<SweepResult> {
    let model = &ctx.model;
    let mut out = SweepResult::new("bsde");
    let pools = ctx.pools()?;
    let table = ctx.lambda_table(&pools)?;
    let etas = ctx.cfg.positive_etas();
    for &eta in &etas {
        let t = Instant::now();
        let sol = ctx.limit_bsde(&table, eta, 0.0)?;
        out.rows.push(Row::new(None, Some(eta), "limit_bsde", &sol.y0, secs(t)));
        out.checks.push(Check::flag(format!("limit_terminal_exact(eta={eta})"), sol.terminal_exact, "Y_N = h(X_1) pathwise"));
    }
    let (Some(&eps), Some(&eta)) = (ctx.cfg.epsilon_grid.last(), etas.first()) else {
        return Ok(out);
    };
    let t = Instant::now();
    let full = solve_full_bsde(model, eps, eta, &ctx.seeded.bsde)?;
    out.rows.push(Row::new(Some(eps), Some(eta), "full_bsde", &full.y0, secs(t)));
    out.checks.push(Check::flag("full_terminal_exact", full.terminal_exact, "Y_N = h(X_1) pathwise"));
    let params = TwoScaleParams::from_model(model, eps, eta)?;
    let n_eval = ctx.seeded.policy.n_eval;
    let eval_seed = ctx.seeded.policy.eval_seed;
    let greedy = greedy_policy(model, eps, eta, full.field(model))?;
    let g = value_by_policy(model, &params, &greedy, n_eval, eval_seed)?;
    out.rows.push(Row::new(Some(eps), Some(eta), "greedy_from_bsde", &g, secs(t)));
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed ^ 0x5a);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..50 {
        let p = RandomPolicy::new(&mut rng, model.controls.len(), params.n_steps);
        let v = value_by_policy(model, &params, &p, n_eval, eval_seed)?;
        worst = worst.max(full.y0.mean - 3.0 * combined(&full.y0, &v) - v.mean);
    }
    worst = worst.max(full.y0.mean - 3.0 * combined(&full.y0, &g) - g.mean);
    out.checks.push(Check::at_most(
        "sandwich",
        worst,
        0.0,
        "max over 50 random policies and the greedy one of Y0 - 3 se - J",
    ));
    Ok(out)
}

/// Reduced problem over the `eta` grid; on `R = 0` models also the
/// deterministic transcription and the grid oracle.
pub fn run_reduce(ctx: &Context) -> Result<SweepResult> {
    let model = &ctx.model;
    let mut out = SweepResult::new("reduce");
    let pools = ctx.pools()?;
    let table = ctx.lambda_table(&pools)?;
    let params = ctx.truncation(&table)?;
    let leg = ctx.legendre_table(&table, &params)?;
    reduce_with(ctx, &leg, &mut out)?;
    if model.coeffs.r_is_zero() {
        deterministic_checks(ctx, &leg, &mut out)?;
    }
    Ok(out)
}

fn reduce_with(ctx: &Context, leg: &LegendreTable, out: &mut SweepResult) -> Result<()> {
    let model = &ctx.model;
    let rs = &ctx.seeded.reduced;
    let mut policies = Vec::new();
    for &eta in &ctx.cfg.eta_grid {
        let t = Instant::now();
        let sol = solve_reduced(model, leg, eta, rs)?;
        out.rows.push(Row::new(None, Some(eta), "reduced", &sol.estimate, secs(t)));
        policies.push(sol.policy);
    }
    if !ctx.cfg.has_zero_eta() || ctx.cfg.eta_grid.len() < 3 {
        return Ok(());
    }
    // every trained policy at every eta on common paths; best per eta
    let best: Vec<Vec<f64>> = ctx
        .cfg
        .eta_grid
        .iter()
        .map(|&eta| best_reduced(model, leg, eta, &policies, rs.n_steps, rs.n_eval, rs.eval_seed))
        .collect::<Result<_>>()?;
    let base = best.last().unwrap();
    let etas = ctx.cfg.positive_etas();
    let mut dev = Vec::new();
    let mut points = Vec::new();
    for (k, &eta) in etas.iter().enumerate() {
        let (d, se) = paired_diff(&best[k], base);
        dev.push(d.abs());
        points.push((eta, d.abs(), se));
    }
    out.plots.push(Plot { name: "eta_continuity".into(), x_label: "eta".into(), y_label: "deviation".into(), points });
    match fit_loglog(&etas, &dev) {
        Some(f) => {
            out.checks.push(Check::at_least("reduced_eta_slope", f.slope, 0.8, "log-log slope of |reduced(eta) - reduced(0)|"));
            out.slopes.push(Slope::from_fit("reduced_eta", &f));
        }
        None => out.checks.push(Check::flag("reduced_eta_slope", false, "a deviation vanished; no log-log fit")),
    }
    Ok(())
}

fn best_reduced(
    model: &twoscale_core::ModelSpec,
    leg: &LegendreTable,
    eta: f64,
    policies: &[ReducedPolicy],
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut best: Option<Vec<f64>> = None;
    for p in policies {
        let s = reduced_cost_samples(model, leg, eta, p, n_steps, n_paths, seed)?.samples;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        if best.as_ref().is_none_or(|b| mean(&s) < mean(b)) {
            best = Some(s);
        }
    }
    Ok(best.unwrap())
}

/// Pipeline plus the stochastic, deterministic and grid solutions of the
/// reduced problem at `eta = 0`; needs an `R = 0` model.
pub fn deterministic_reduction(ctx: &Context) -> Result<SweepResult> {
    anyhow::ensure!(ctx.model.coeffs.r_is_zero(), "the deterministic reduction needs R = 0");
    let mut out = SweepResult::new("deterministic");
    let pools = ctx.pools()?;
    let table = ctx.lambda_table(&pools)?;
    let params = ctx.truncation(&table)?;
    let leg = ctx.legendre_table(&table, &params)?;
    deterministic_checks(ctx, &leg, &mut out)?;
    Ok(out)
}

fn deterministic_checks(ctx: &Context, leg: &LegendreTable, out: &mut SweepResult) -> Result<()> {
    let model = &ctx.model;
    let t = Instant::now();
    let stoch = solve_reduced(model, leg, 0.0, &ctx.seeded.reduced)?;
    let det = solve_reduced_deterministic(model, leg, &ctx.seeded.deterministic)?;
    let det_est = ValueEstimate { mean: det.value, stderr: 0.0, n: 1, fingerprint: leg.fingerprint.clone() };
    out.rows.push(Row::new(None, Some(0.0), "reduced_deterministic", &det_est, secs(t)));
    let dp = &ctx.cfg.dp;
    let t = Instant::now();
    let dp_value = dp_oracle(
        model,
        leg,
        0.0,
        &linspace(dp.x_min, dp.x_max, dp.x_points),
        &linspace(-leg.params.alpha_radius(), leg.params.alpha_radius(), dp.alpha_points),
        dp.n_steps,
    )?;
    let dp_est = ValueEstimate { mean: dp_value, ..det_est.clone() };
    out.rows.push(Row::new(None, Some(0.0), "dp_oracle", &dp_est, secs(t)));
    let floor = ctx.cfg.budgets.deterministic_floor;
    let se = stoch.estimate.stderr;
    out.checks.push(Check::at_most(
        "stochastic_vs_deterministic",
        (stoch.estimate.mean - det.value).abs(),
        (3.0 * se).max(floor),
        format!("3 stderr with a floor of {floor} when both are deterministic"),
    ));
    out.checks.push(Check::at_most("stochastic_vs_dp", (stoch.estimate.mean - dp_value).abs(), dp.tol, ""));
    out.checks.push(Check::at_most("deterministic_vs_dp", (det.value - dp_value).abs(), dp.tol, ""));
    let mut csv = String::from("t,alpha,x1\n");
    for (i, t) in det.times.iter().enumerate() {
        let a = det.alpha.get(i).map(|a| a[0].to_string()).unwrap_or_default();
        csv.push_str(&format!("{t},{a},{}\n", det.x[i][0]));
    }
    let dir = &ctx.cfg.out_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("deterministic_control.csv"), csv)?;
    Ok(())
}

/// `|V^{eps,eta} - V^{eps,0}|` per `epsilon` over one policy pool, with the
/// per-`epsilon` log-log slopes and their spread.
pub fn run_eta_sweep(ctx: &Context) -> Result<SweepResult> {
    anyhow::ensure!(ctx.cfg.has_zero_eta(), "the eta sweep needs a trailing 0 in eta_grid");
    let model = &ctx.model;
    let ps = &ctx.seeded.policy;
    let etas = ctx.cfg.positive_etas();
    let mut out = SweepResult::new("sweep_eta");
    let mut sup_dev = vec![(0.0f64, 0.0f64); etas.len()];
    let mut slopes = Vec::new();
    for &eps in &ctx.cfg.epsilon_grid {
        let t = Instant::now();
        let bank = PolicyBank::train(model, eps, &ctx.cfg.eta_grid, ps)?;
        let results: Vec<_> = ctx
            .cfg
            .eta_grid
            .iter()
            .map(|&eta| bank.evaluate(model, eta, ps))
            .collect::<twoscale_core::Result<_>>()?;
        let rt = secs(t) / results.len() as f64;
        for (r, &eta) in results.iter().zip(&ctx.cfg.eta_grid) {
            out.rows.push(Row::new(Some(eps), Some(eta), "policy_search", &r.estimate, rt));
        }
        let base = &results.last().unwrap().best_samples;
        let mut dev = Vec::new();
        let mut points = Vec::new();
        for (k, &eta) in etas.iter().enumerate() {
            let (d, se) = paired_diff(&results[k].best_samples, base);
            dev.push(d.abs());
            points.push((eta, d.abs(), se));
            let est = ValueEstimate { mean: d.abs(), stderr: se, n: base.len(), fingerprint: results[k].estimate.fingerprint.clone() };
            out.rows.push(Row::new(Some(eps), Some(eta), "deviation_from_eta0", &est, 0.0));
            if d.abs() > sup_dev[k].0 {
                sup_dev[k] = (d.abs(), se);
            }
        }
        out.plots.push(Plot { name: format!("deviation_eps{eps}"), x_label: "eta".into(), y_label: "deviation".into(), points });
        match fit_loglog(&etas, &dev) {
            Some(f) => {
                out.checks.push(Check::at_least(
                    format!("eta_slope(eps={eps})"),
                    f.slope,
                    ctx.cfg.budgets.min_eta_slope,
                    "log-log slope of |V(eps,eta) - V(eps,0)|",
                ));
                out.slopes.push(Slope::from_fit(format!("eps={eps}"), &f));
                slopes.push(f.slope);
            }
            None => out.checks.push(Check::flag(format!("eta_slope(eps={eps})"), false, "a deviation vanished")),
        }
    }
    for (k, &eta) in etas.iter().enumerate() {
        let est = ValueEstimate { mean: sup_dev[k].0, stderr: sup_dev[k].1, n: ps.n_eval, fingerprint: String::new() };
        out.rows.push(Row::new(None, Some(eta), "sup_eps_deviation", &est, 0.0));
    }
    if slopes.len() > 1 {
        let hi = slopes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = slopes.iter().cloned().fold(f64::INFINITY, f64::min);
        out.checks.push(Check::at_most("eta_slope_spread", hi - lo, ctx.cfg.budgets.eta_slope_spread, "max - min slope over epsilon"));
    }
    Ok(out)
}

/// `V^{eps,eta}` against the limit `Y_0^eta` over the `epsilon` grid, for
/// each positive `eta`.
pub fn run_eps_sweep(ctx: &Context) -> Result<SweepResult> {
    let model = &ctx.model;
    let ps = &ctx.seeded.policy;
    let mut out = SweepResult::new("sweep_eps");
    let pools = ctx.pools()?;
    let table = ctx.lambda_table(&pools)?;
    let grid = &ctx.cfg.epsilon_grid;
    for eta in ctx.cfg.positive_etas() {
        let t = Instant::now();
        let limit = ctx.limit_bsde(&table, eta, 0.0)?;
        out.rows.push(Row::new(None, Some(eta), "limit_bsde", &limit.y0, secs(t)));
        let mut values = Vec::new();
        let mut points = Vec::new();
        for &eps in grid {
            let t = Instant::now();
            let v = estimate_V(model, eps, eta, ps)?.estimate;
            out.rows.push(Row::new(Some(eps), Some(eta), "policy_search", &v, secs(t)));
            let dev = (v.mean - limit.y0.mean).abs();
            points.push((eps, dev, combined(&v, &limit.y0)));
            values.push(v);
        }
        out.plots.push(Plot { name: format!("deviation_eta{eta}"), x_label: "epsilon".into(), y_label: "deviation".into(), points: points.clone() });
        let (first, last) = (points[0], *points.last().unwrap());
        let budget = ctx.cfg.budgets.eps_convergence;
        out.checks.push(Check::at_most(
            format!("eps_limit(eta={eta})"),
            last.1,
            3.0 * last.2 + budget,
            format!("|V - Y0| at eps = {}: 3 combined stderr + {budget}", grid[grid.len() - 1]),
        ));
        out.checks.push(Check::at_most(
            format!("eps_trend(eta={eta})"),
            last.1,
            first.1,
            format!("deviation at eps = {} against eps = {}", grid[grid.len() - 1], grid[0]),
        ));
        let diffs: Vec<f64> = values.windows(2).map(|w| (w[1].mean - w[0].mean).abs()).collect();
        let worst = diffs.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        out.checks.push(Check::at_most(
            format!("eps_cauchy(eta={eta})"),
            worst,
            0.0,
            format!("successive differences {diffs:.4?} must decrease"),
        ));
    }
    Ok(out)
}

/// The three estimates of the limit value and their `x0` slopes.
pub fn interchange_estimates(ctx: &Context) -> Result<SweepResult> {
    let model = &ctx.model;
    let ps = &ctx.seeded.policy;
    let rs = &ctx.seeded.reduced;
    let delta = ctx.cfg.lipschitz.delta;
    let eps = *ctx.cfg.epsilon_grid.last().unwrap();
    let eta = *ctx.cfg.positive_etas().last().context("interchange needs a positive eta")?;
    let mut out = SweepResult::new("interchange");

    let t = Instant::now();
    let bank = PolicyBank::train(model, eps, &ctx.cfg.eta_grid, ps)?;
    let v = bank.evaluate(model, 0.0, ps)?;
    let (v_slope, _) = bank.x0_slope(model, 0.0, delta, &v.leading(ctx.cfg.lipschitz.candidates), ps)?;
    out.rows.push(Row::new(Some(eps), Some(0.0), "policy_search", &v.estimate, secs(t)));

    let t = Instant::now();
    let pools = ctx.pools()?;
    let table = ctx.lambda_table(&pools)?;
    let y = ctx.limit_bsde(&table, eta, 0.0)?;
    let y_slope = (ctx.limit_bsde(&table, eta, delta)?.y0.mean - ctx.limit_bsde(&table, eta, -delta)?.y0.mean)
        / (2.0 * delta);
    out.rows.push(Row::new(None, Some(eta), "limit_bsde", &y.y0, secs(t)));

    let t = Instant::now();
    let params = ctx.truncation(&table)?;
    let leg = ctx.legendre_table(&table, &params)?;
    let red = solve_reduced(model, &leg, 0.0, rs)?;
    // re-solved at each shifted state: the conjugate's x-Lipschitz constant
    // grows with kappa, so a policy tuned at x0 misstates the slope
    let shifted = |s: f64| -> Result<f64> { Ok(solve_reduced(&ctx.shifted(s)?, &leg, 0.0, rs)?.estimate.mean) };
    let r_slope = (shifted(delta)? - shifted(-delta)?) / (2.0 * delta);
    out.rows.push(Row::new(None, Some(0.0), "reduced", &red.estimate, secs(t)));

    let budget = ctx.cfg.budgets.interchange;
    let named = [("policy_search", &v.estimate), ("limit_bsde", &y.y0), ("reduced", &red.estimate)];
    for i in 0..3 {
        for j in i + 1..3 {
            let (a, b) = (named[i].1, named[j].1);
            out.checks.push(Check::at_most(
                format!("agree({},{})", named[i].0, named[j].0),
                (a.mean - b.mean).abs(),
                3.0 * combined(a, b) + budget,
                format!("3 combined stderr + {budget}"),
            ));
        }
    }
    let slopes = [v_slope, y_slope, r_slope];
    for (name, s) in ["policy_search", "limit_bsde", "reduced"].iter().zip(slopes) {
        let est = ValueEstimate { mean: s, stderr: 0.0, n: 1, fingerprint: String::new() };
        out.rows.push(Row::new(None, None, format!("x0_slope_{name}"), &est, 0.0));
    }
    out.checks.push(Check::at_most(
        "x0_slope_agreement",
        relative_spread(&slopes),
        ctx.cfg.lipschitz.spread,
        format!("max/min - 1 of |slope| over {slopes:.4?}"),
    ));
    Ok(out)
}

/// Central-difference `x0` slopes of `V^{eps,eta}` over the whole grid.
pub fn lipschitz_grid(ctx: &Context) -> Result<SweepResult> {
    let model = &ctx.model;
    let ps = &ctx.seeded.policy;
    let lc = &ctx.cfg.lipschitz;
    let mut out = SweepResult::new("lipschitz");
    let mut slopes = Vec::new();
    for &eps in &ctx.cfg.epsilon_grid {
        let bank = PolicyBank::train(model, eps, &ctx.cfg.eta_grid, ps)?;
        let mut points = Vec::new();
        for &eta in &ctx.cfg.eta_grid {
            let t = Instant::now();
            let v = bank.evaluate(model, eta, ps)?;
            let (s, se) = bank.x0_slope(model, eta, lc.delta, &v.leading(lc.candidates), ps)?;
            let est = ValueEstimate { mean: s, stderr: se, n: ps.n_eval, fingerprint: v.estimate.fingerprint.clone() };
            out.rows.push(Row::new(Some(eps), Some(eta), "x0_slope", &est, secs(t)));
            points.push((eta, s.abs(), se));
            slopes.push(s);
        }
        out.plots.push(Plot { name: format!("x0_slope_eps{eps}"), x_label: "eta".into(), y_label: "abs_slope".into(), points });
    }
    out.checks.push(Check::at_most(
        "lipschitz_uniformity",
        relative_spread(&slopes),
        lc.spread,
        "max/min - 1 of |slope| over the (epsilon, eta) grid",
    ));
    Ok(out)
}

pub fn run_interchange(ctx: &Context) -> Result<SweepResult> {
    let mut out = interchange_estimates(ctx)?;
    out.merge(lipschitz_grid(ctx)?);
    Ok(out)
}
