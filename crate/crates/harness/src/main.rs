use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand};
use twoscale_harness::commands;
use twoscale_harness::{Context, ExperimentConfig, SweepResult};

#[derive(Parser)]
#[command(name = "twoscale", version, about = "Two-scale control experiments: validation, solvers and convergence sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed mixed into every solver seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write 0 in the runtime column so reruns give identical CSV bytes.
    #[arg(long)]
    no_timings: bool,
    /// Worker threads.
    #[arg(long, env = "TWOSCALE_WORKERS")]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Model validators and moment bounds over the grid.
    Validate(Common),
    /// One path with replay, semigroup and contraction checks.
    Simulate(Common),
    /// Ergodic value table and its property audit.
    Lambda(Common),
    /// Truncation, conjugate table and Fenchel round trip.
    Legendre(Common),
    /// Limit and regularized BSDEs with the sandwich check.
    Bsde(Common),
    /// Reduced control problem over the eta grid.
    Reduce(Common),
    /// Vanishing-noise rate per epsilon.
    SweepEta(Common),
    /// Convergence in epsilon to the limit BSDE.
    SweepEps(Common),
    /// The three estimates of the limit value and Lipschitz uniformity.
    Interchange(Common),
}

fn setup(c: &Common) -> Result<Context> {
    if let Some(n) = c.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring workers")?;
    }
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    Context::new(cfg)
}

fn finish(ctx: &Context, c: &Common, result: &SweepResult) -> Result<bool> {
    let paths = result.write_to(&ctx.cfg.out_dir, !c.no_timings)?;
    fs::write(ctx.cfg.out_dir.join("config_used.toml"), ctx.cfg.to_toml()?)?;
    result.print_checks();
    for p in paths {
        log::info!("wrote {}", p.display());
    }
    Ok(result.passed())
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Validate(c)
            | Command::Simulate(c)
            | Command::Lambda(c)
            | Command::Legendre(c)
            | Command::Bsde(c)
            | Command::Reduce(c)
            | Command::SweepEta(c)
            | Command::SweepEps(c)
            | Command::Interchange(c) => c,
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    let c = cli.command.common();
    let ctx = setup(c)?;
    let result = match &cli.command {
        Command::Validate(_) => commands::run_validate(&ctx)?,
        Command::Simulate(_) => {
            let (r, path_csv) = commands::run_simulate(&ctx)?;
            fs::create_dir_all(&ctx.cfg.out_dir)?;
            fs::write(ctx.cfg.out_dir.join("path.csv"), path_csv)?;
            r
        }
        Command::Lambda(_) => {
            let r = commands::run_lambda(&ctx)?;
            let pools = ctx.pools()?;
            let table = ctx.lambda_table(&pools)?;
            fs::create_dir_all(&ctx.cfg.out_dir)?;
            table.write_csv(fs::File::create(ctx.cfg.out_dir.join("lambda_table.csv"))?)?;
            r
        }
        Command::Legendre(_) => {
            let (r, leg) = commands::run_legendre(&ctx)?;
            fs::create_dir_all(&ctx.cfg.out_dir)?;
            leg.write_csv(fs::File::create(ctx.cfg.out_dir.join("legendre_table.csv"))?)?;
            r
        }
        Command::Bsde(_) => commands::run_bsde(&ctx)?,
        Command::Reduce(_) => commands::run_reduce(&ctx)?,
        Command::SweepEta(_) => commands::run_eta_sweep(&ctx)?,
        Command::SweepEps(_) => commands::run_eps_sweep(&ctx)?,
        Command::Interchange(_) => commands::run_interchange(&ctx)?,
    };
    finish(&ctx, c, &result)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
