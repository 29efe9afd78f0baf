//! The chain ergodic pools -> `lambda` table -> truncation -> conjugate
//! table, shared by the subcommands.

use std::time::Instant;

use anyhow::{bail, Context as _, Result};
use twoscale_core::bsde::{solve_limit_bsde, BsdeSolution};
use twoscale_core::ergodic::{build_pools, LambdaPools, LambdaTable};
use twoscale_core::legendre::{build_legendre_table, choose_kappa, LegendreTable, StarGrid, TruncationParams};
use twoscale_core::ModelSpec;

use crate::config::{ExperimentConfig, Seeded};

/// A configured run: the model and seeded solver settings.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub model: ModelSpec,
    pub seeded: Seeded,
}

impl Context {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.check()?;
        let model = cfg.model.build().context("building the model")?;
        let seeded = cfg.seeded();
        Ok(Self { cfg, model, seeded })
    }

    pub fn pools(&self) -> Result<LambdaPools> {
        let t = Instant::now();
        let pools = build_pools(&self.model, &self.cfg.lambda.x_grid(), &self.seeded.ergodic)?;
        log::info!("ergodic pools on {} nodes in {:.1?}", pools.pools.len(), t.elapsed());
        Ok(pools)
    }

    /// The interpolation table used by the limit BSDE and the conjugate.
    pub fn lambda_table(&self, pools: &LambdaPools) -> Result<LambdaTable> {
        let axis = self.cfg.lambda.z_axis();
        Ok(pools.table(&vec![axis; self.model.active_dim])?)
    }

    /// The coarse `(x, z)` table of the property audit, on its own pools.
    pub fn audit_table(&self) -> Result<LambdaTable> {
        let (xs, zs) = self.cfg.lambda.audit_grids();
        let pools = build_pools(&self.model, &xs, &self.seeded.ergodic)?;
        Ok(pools.table(&vec![zs; self.model.active_dim])?)
    }

    /// Limit BSDE at `eta` from the configured initial state shifted by
    /// `shift` in its leading coordinate.
    pub fn limit_bsde(&self, table: &LambdaTable, eta: f64, shift: f64) -> Result<BsdeSolution> {
        let model = self.shifted(shift)?;
        Ok(solve_limit_bsde(&model, eta, table, &self.seeded.bsde)?)
    }

    pub fn shifted(&self, shift: f64) -> Result<ModelSpec> {
        if shift == 0.0 {
            return Ok(self.model.clone());
        }
        let mut x0 = self.model.x0.clone();
        x0[0] += shift;
        Ok(self.model.with_initial_state(x0, self.model.q0.clone())?)
    }

    /// Lipschitz estimate of `v^eta` over the positive `eta` grid, unless
    /// the config fixes it: the larger of the central-difference slope in
    /// x0 and the 99% quantile of `|Z2 / eta|` along the forward cloud,
    /// which is the gradient the driver actually sees.
    pub fn lipschitz(&self, table: &LambdaTable) -> Result<f64> {
        if let Some(l) = self.cfg.legendre.lipschitz {
            return Ok(l);
        }
        let d = self.cfg.lipschitz.delta;
        let mut worst = 0.0f64;
        for eta in self.cfg.positive_etas() {
            let up = self.limit_bsde(table, eta, d)?;
            let down = self.limit_bsde(table, eta, -d)?;
            let slope = (up.y0.mean - down.y0.mean) / (2.0 * d);
            let grad = up.driver_z_quantile(0.99).max(down.driver_z_quantile(0.99));
            log::info!("v^eta at eta = {eta}: x0 slope {slope:.4}, 99% gradient norm {grad:.4}");
            worst = worst.max(slope.abs()).max(grad);
        }
        Ok(worst)
    }

    pub fn truncation(&self, table: &LambdaTable) -> Result<TruncationParams> {
        let lip = self.lipschitz(table)?;
        let p = choose_kappa(&self.model, lip)?;
        let reach = table.z_radius();
        if p.cone_radius() > reach {
            bail!(
                "kappa + M = {:.3} exceeds the lambda table's z reach {reach}; raise lambda.z_outer_radius",
                p.cone_radius()
            );
        }
        Ok(p)
    }

    pub fn legendre_table(&self, table: &LambdaTable, params: &TruncationParams) -> Result<LegendreTable> {
        let lc = &self.cfg.legendre;
        let grid = StarGrid::new(params.cone_radius(), lc.z_points)?;
        let t = Instant::now();
        let leg = build_legendre_table(table, &table.x_grid, self.model.active_dim, params, lc.alpha_points, &grid)
            .context("building the conjugate table (a rim doubling past the lambda table reach needs a larger lambda.z_outer_radius)")?;
        log::info!("conjugate table in {:.1?}", t.elapsed());
        Ok(leg)
    }
}
