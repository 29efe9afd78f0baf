//! Acceptance run: one line per criterion, nonzero exit if any fails.
//!
//! `cargo test -p twoscale-harness --release --test acceptance`; pass
//! criterion numbers as arguments to run a subset.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use twoscale_core::dynamics::{contraction_slope, TwoScaleParams};
use twoscale_core::ergodic::estimate_lambda;
use twoscale_core::presets::{single_mode_ou, single_mode_reaction_diffusion};
use twoscale_core::spectral::ModeVector;
use twoscale_harness::commands::{
    deterministic_reduction, interchange_estimates, lipschitz_grid, run_bsde, run_eps_sweep, run_eta_sweep,
    run_lambda, run_legendre, run_simulate,
};
use twoscale_harness::config::ExperimentConfig;
use twoscale_harness::pipeline::Context;
use twoscale_harness::report::{Check, SweepResult};

struct Outcome {
    checks: Vec<Check>,
    /// Wall-clock budget in seconds, if the criterion has one.
    budget_s: Option<f64>,
}

impl Outcome {
    fn of(result: &SweepResult, names: &[&str]) -> Self {
        let checks = result
            .checks
            .iter()
            .filter(|c| names.iter().any(|n| c.name.starts_with(n)))
            .cloned()
            .collect();
        Self { checks, budget_s: None }
    }

    fn all(result: &SweepResult) -> Self {
        Self { checks: result.checks.clone(), budget_s: None }
    }

    fn within(mut self, budget_s: f64) -> Self {
        self.budget_s = Some(budget_s);
        self
    }
}

fn config(preset: &str, out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.preset = preset.into();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn lambda_properties(out: &std::path::Path) -> Result<Outcome> {
    let mut checks = Vec::new();
    for preset in ["reaction_diffusion", "linear_toy"] {
        let cfg = config(preset, out);
        let r = run_lambda(&Context::new(cfg)?)?;
        for mut c in r.checks.into_iter().filter(|c| c.name.starts_with("lambda_")) {
            c.name = format!("{preset}/{}", c.name);
            checks.push(c);
        }
    }
    Ok(Outcome { checks, budget_s: Some(300.0) })
}

/// `E[min(q^2, 1)]` for `q ~ N(0, var)` by composite Simpson on `[-10 sd, 10 sd]`.
fn gaussian_capped_square(var: f64) -> f64 {
    let sd = var.sqrt();
    let n = 20_000;
    let (a, b) = (-10.0 * sd, 10.0 * sd);
    let h = (b - a) / n as f64;
    let f = |q: f64| (q * q).min(1.0) * (-q * q / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn lambda_oracles(out: &std::path::Path) -> Result<Outcome> {
    let cfg = config("reaction_diffusion", out);
    let mut ctx = Context::new(cfg)?;
    ctx.model = single_mode_reaction_diffusion()?;
    let r = run_lambda(&ctx)?;
    let mut checks = Outcome::of(&r, &["lambda_vs_value_iteration"]).checks;

    let (m, g) = (1.0, 3.0);
    let ou = single_mode_ou(m, g)?;
    let exact = gaussian_capped_square(g * g / (2.0 * (PI * PI + m)));
    let est = estimate_lambda(&ou, &ModeVector::new(vec![0.0]), &[0.0], &ctx.seeded.ergodic)?;
    checks.push(Check::at_most(
        "ou_quadrature",
        (est.mean - exact).abs(),
        3.0 * est.stderr,
        format!("cesaro {:.5} against quadrature {exact:.5}", est.mean),
    ));
    Ok(Outcome { checks, budget_s: None })
}

fn fenchel(out: &std::path::Path) -> Result<Outcome> {
    let (r, _) = run_legendre(&Context::new(config("reaction_diffusion", out))?)?;
    Ok(Outcome::of(&r, &["fenchel_round_trip"]))
}

fn eta_rate(out: &std::path::Path) -> Result<Outcome> {
    let mut cfg = config("reaction_diffusion", out);
    cfg.epsilon_grid = vec![0.2, 0.05];
    cfg.eta_grid = vec![0.4, 0.2, 0.1, 0.05, 0.0];
    let r = run_eta_sweep(&Context::new(cfg)?)?;
    Ok(Outcome::all(&r).within(900.0))
}

fn eps_convergence(out: &std::path::Path) -> Result<Outcome> {
    let mut cfg = config("reaction_diffusion", out);
    cfg.epsilon_grid = vec![0.5, 0.2, 0.1, 0.05, 0.02];
    cfg.eta_grid = vec![0.05];
    let r = run_eps_sweep(&Context::new(cfg)?)?;
    Ok(Outcome::all(&r))
}

fn interchange(out: &std::path::Path) -> Result<Outcome> {
    let r = interchange_estimates(&Context::new(config("reaction_diffusion", out))?)?;
    for c in r.checks.iter().filter(|c| !c.name.starts_with("agree")) {
        println!("    info {}", c.line());
    }
    Ok(Outcome::of(&r, &["agree"]).within(1200.0))
}

fn deterministic(out: &std::path::Path) -> Result<Outcome> {
    let mut cfg = config("degenerate_R0", out);
    cfg.eta_grid = vec![0.2, 0.1, 0.05, 0.0];
    let r = deterministic_reduction(&Context::new(cfg)?)?;
    Ok(Outcome::all(&r))
}

/// Relative gap between the mean contraction slope and `-mu / eps` on a
/// model whose fast flow is linear, where `mu` is the exact rate.
fn exact_contraction(out: &std::path::Path) -> Result<Check> {
    let ctx = Context::new(config("linear_toy", out))?;
    let (model, eps) = (&ctx.model, ctx.cfg.simulate.epsilon);
    let params = TwoScaleParams::from_model(model, eps, ctx.cfg.simulate.eta)?;
    let mut q_alt = model.q0.clone();
    q_alt[0] += 1.0;
    let q_alt = ModeVector::new(q_alt);
    let mut total = 0.0;
    for p in 0..20 {
        total += contraction_slope(model, &params, &q_alt, 5.0 * eps, ctx.seeded.simulate_seed, p)?;
    }
    let target = -model.constants.mu / eps;
    let rel = (total / 20.0 - target).abs() / target.abs();
    Ok(Check::at_most(
        "fast_contraction_rate(linear_toy)",
        rel,
        ctx.cfg.simulate.contraction_tol,
        format!("relative gap of the mean slope to -mu/eps = {target:.4}"),
    ))
}

fn dynamics(out: &std::path::Path) -> Result<Outcome> {
    let (sim, _) = run_simulate(&Context::new(config("reaction_diffusion", out))?)?;
    let mut cfg = config("reaction_diffusion", out);
    cfg.epsilon_grid = vec![0.2];
    cfg.eta_grid = vec![0.2];
    let bsde = run_bsde(&Context::new(cfg)?)?;
    let mut o = Outcome::all(&sim);
    o.checks.push(exact_contraction(out)?);
    o.checks.extend(bsde.checks);
    Ok(o)
}

fn lipschitz(out: &std::path::Path) -> Result<Outcome> {
    let r = lipschitz_grid(&Context::new(config("reaction_diffusion", out))?)?;
    Ok(Outcome::all(&r))
}

type Criterion = fn(&std::path::Path) -> Result<Outcome>;

const CRITERIA: [(&str, Criterion); 9] = [
    ("lambda property suite", lambda_properties),
    ("lambda oracle agreement", lambda_oracles),
    ("Fenchel round trip", fenchel),
    ("vanishing-noise rate", eta_rate),
    ("epsilon convergence at fixed eta", eps_convergence),
    ("interchange of limits", interchange),
    ("deterministic reduction", deterministic),
    ("dynamics invariants", dynamics),
    ("Lipschitz uniformity", lipschitz),
];

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let out = tempfile::tempdir().expect("temporary output directory");
    let mut failures = 0;
    for (i, (name, run)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = run(out.path());
        let elapsed = t.elapsed().as_secs_f64();
        let (passed, detail) = match result {
            Ok(o) => {
                for c in &o.checks {
                    println!("    {}", c.line());
                }
                let in_time = o.budget_s.is_none_or(|b| elapsed <= b);
                let budget = o.budget_s.map(|b| format!(", budget {b:.0} s")).unwrap_or_default();
                let failed = o.checks.iter().filter(|c| !c.passed).count();
                let ok = !o.checks.is_empty() && failed == 0 && in_time;
                (ok, format!("{} checks, {failed} failed, {elapsed:.1} s{budget}", o.checks.len()))
            }
            Err(e) => (false, format!("error after {elapsed:.1} s: {e:#}")),
        };
        if !passed {
            failures += 1;
        }
        println!("criterion {n} [{}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
