//! Experiment configuration, read from TOML.
//!
//! Every section is optional and falls back to the library defaults, so a
//! config file only needs the keys it changes. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use twoscale_core::bsde::{BsdeSettings, PolicySearchSettings};
use twoscale_core::ergodic::ErgodicSettings;
use twoscale_core::presets::{load_preset, LinearToyParams, ReactionDiffusionParams, PRESET_NAMES};
use twoscale_core::reduced::{DeterministicSettings, ReducedSettings};
use twoscale_core::ModelSpec;

/// Built-in model, optionally with parameter overrides for its family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    /// Overrides for `reaction_diffusion` and `degenerate_R0`.
    pub reaction_diffusion: Option<ReactionDiffusionParams>,
    pub linear_toy: Option<LinearToyParams>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { preset: "reaction_diffusion".into(), reaction_diffusion: None, linear_toy: None }
    }
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec> {
        let model = match (self.preset.as_str(), &self.reaction_diffusion, &self.linear_toy) {
            (_, Some(_), Some(_)) => bail!("give overrides for one model family only"),
            ("reaction_diffusion", Some(p), None) => p.build()?,
            ("degenerate_R0", Some(p), None) => ReactionDiffusionParams { r0: 0.0, ..p.clone() }.build()?,
            ("linear_toy", None, Some(p)) => p.build()?,
            (name, None, None) => load_preset(name)?,
            (name, _, _) => bail!(
                "overrides do not match preset '{name}' (available: {})",
                PRESET_NAMES.join(", ")
            ),
        };
        Ok(model)
    }
}

/// Grids for the ergodic table: the leading slow coordinate and, per active
/// axis, a fine band around zero plus unit steps out to the outer radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub x_points: usize,
    pub z_fine_radius: f64,
    pub z_fine_step: f64,
    pub z_outer_radius: f64,
    /// Nodes per axis of the property-audit table.
    pub audit_points: usize,
    pub audit_z_radius: f64,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        Self {
            x_min: -3.0,
            x_max: 3.0,
            x_points: 13,
            z_fine_radius: 3.0,
            z_fine_step: 0.05,
            z_outer_radius: 25.0,
            audit_points: 9,
            audit_z_radius: 2.0,
        }
    }
}

impl LambdaConfig {
    pub fn x_grid(&self) -> Vec<f64> {
        linspace(self.x_min, self.x_max, self.x_points)
    }

    pub fn z_axis(&self) -> Vec<f64> {
        let n = (self.z_fine_radius / self.z_fine_step).round() as i64;
        let mut axis: Vec<f64> = (-n..=n).map(|i| i as f64 * self.z_fine_step).collect();
        let mut r = self.z_fine_radius.floor() + 1.0;
        while r <= self.z_outer_radius + 1e-9 {
            axis.push(r);
            axis.push(-r);
            r += 1.0;
        }
        axis.sort_by(|a, b| a.partial_cmp(b).unwrap());
        axis.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        axis
    }

    pub fn audit_grids(&self) -> (Vec<f64>, Vec<f64>) {
        (
            linspace(self.x_min, self.x_max, self.audit_points),
            linspace(-self.audit_z_radius, self.audit_z_radius, self.audit_points),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LegendreConfig {
    pub alpha_points: usize,
    /// Points per axis of the `z` lattice searched for the conjugate.
    pub z_points: usize,
    /// Lipschitz constant of the regularized value in `x`; estimated from
    /// the limit BSDE when absent.
    pub lipschitz: Option<f64>,
    pub round_trip_tol: f64,
}

impl Default for LegendreConfig {
    fn default() -> Self {
        Self { alpha_points: 201, z_points: 201, lipschitz: None, round_trip_tol: 0.02 }
    }
}

/// Finite-difference settings for slopes in `x0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LipschitzConfig {
    pub delta: f64,
    /// Pooled policies re-evaluated at the shifted initial states.
    pub candidates: usize,
    /// Allowed relative spread `max / min - 1` of the slopes.
    pub spread: f64,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        Self { delta: 0.25, candidates: 3, spread: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub x_points: usize,
    pub alpha_points: usize,
    pub n_steps: usize,
    pub tol: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self { x_min: -2.0, x_max: 2.0, x_points: 401, alpha_points: 81, n_steps: 100, tol: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub epsilon: f64,
    pub eta: f64,
    pub n_paths: usize,
    /// Relative tolerance on the fast contraction rate.
    pub contraction_tol: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, eta: 0.1, n_paths: 200, contraction_tol: 0.1 }
    }
}

/// Budgets added to `3 stderr` in the comparisons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    pub eps_convergence: f64,
    pub interchange: f64,
    pub min_eta_slope: f64,
    pub eta_slope_spread: f64,
    /// Absolute floor under `3 stderr` when both solvers are deterministic.
    pub deterministic_floor: f64,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            eps_convergence: 0.05,
            interchange: 0.1,
            min_eta_slope: 0.8,
            eta_slope_spread: 0.3,
            deterministic_floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Descending, positive.
    pub epsilon_grid: Vec<f64>,
    /// Descending, positive except an optional trailing 0.
    pub eta_grid: Vec<f64>,
    /// Mixed into every solver seed; 0 keeps the section seeds as written.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub ergodic: ErgodicSettings,
    pub lambda: LambdaConfig,
    pub legendre: LegendreConfig,
    pub bsde: BsdeSettings,
    pub policy: PolicySearchSettings,
    pub reduced: ReducedSettings,
    pub deterministic: DeterministicSettings,
    pub dp: DpConfig,
    pub lipschitz: LipschitzConfig,
    pub simulate: SimulateConfig,
    pub budgets: Budgets,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epsilon_grid: vec![0.5, 0.2, 0.1, 0.05, 0.02],
            eta_grid: vec![0.4, 0.2, 0.1, 0.05, 0.0],
            seed: 0,
            out_dir: PathBuf::from("out"),
            ergodic: ErgodicSettings::default(),
            lambda: LambdaConfig::default(),
            legendre: LegendreConfig::default(),
            bsde: BsdeSettings { basis: twoscale_core::bsde::BasisSpec { slow_vars: 2, fast_vars: 1, degree: 3 }, ..Default::default() },
            policy: PolicySearchSettings::default(),
            reduced: ReducedSettings::default(),
            deterministic: DeterministicSettings::default(),
            dp: DpConfig::default(),
            lipschitz: LipschitzConfig::default(),
            simulate: SimulateConfig::default(),
            budgets: Budgets::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing experiment config")?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn check(&self) -> Result<()> {
        let eps = &self.epsilon_grid;
        if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            bail!("epsilon grid must be nonempty with positive entries");
        }
        if eps.windows(2).any(|w| !(w[0] > w[1])) {
            bail!("epsilon grid must be strictly descending");
        }
        let eta = &self.eta_grid;
        if eta.is_empty() {
            bail!("eta grid must be nonempty");
        }
        let (last, head) = eta.split_last().unwrap();
        if head.iter().any(|e| !(*e > 0.0 && e.is_finite())) || !(*last >= 0.0 && last.is_finite()) {
            bail!("eta grid entries must be positive, except an optional trailing 0");
        }
        if eta.windows(2).any(|w| !(w[0] > w[1])) {
            bail!("eta grid must be strictly descending");
        }
        if self.lambda.x_points < 2 || !(self.lambda.x_max > self.lambda.x_min) {
            bail!("lambda x grid needs two or more points on a nonempty interval");
        }
        if !(self.lambda.z_fine_step > 0.0 && self.lambda.z_outer_radius >= self.lambda.z_fine_radius) {
            bail!("lambda z axis needs a positive fine step and outer radius >= fine radius");
        }
        if !(self.lipschitz.delta > 0.0) {
            bail!("lipschitz delta must be positive");
        }
        Ok(())
    }

    /// Positive entries of the `eta` grid.
    pub fn positive_etas(&self) -> Vec<f64> {
        self.eta_grid.iter().cloned().filter(|e| *e > 0.0).collect()
    }

    pub fn has_zero_eta(&self) -> bool {
        self.eta_grid.last() == Some(&0.0)
    }

    /// Replaces the master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Section settings with the master seed mixed in.
    pub fn seeded(&self) -> Seeded {
        let mix = |s: u64, salt: u64| if self.seed == 0 { s } else { s ^ splitmix(self.seed ^ salt) };
        let mut out = Seeded {
            ergodic: self.ergodic.clone(),
            bsde: self.bsde.clone(),
            policy: self.policy.clone(),
            reduced: self.reduced.clone(),
            deterministic: self.deterministic.clone(),
            simulate_seed: mix(31, 0x51),
        };
        out.ergodic.seed = mix(out.ergodic.seed, 0x11);
        out.bsde.seed = mix(out.bsde.seed, 0x22);
        out.policy.train_seed = mix(out.policy.train_seed, 0x33);
        out.policy.eval_seed = mix(out.policy.eval_seed, 0x34);
        out.reduced.train_seed = mix(out.reduced.train_seed, 0x44);
        out.reduced.eval_seed = mix(out.reduced.eval_seed, 0x45);
        out.deterministic.seed = mix(out.deterministic.seed, 0x46);
        out
    }
}

/// Solver settings after seed mixing.
#[derive(Clone, Debug)]
pub struct Seeded {
    pub ergodic: ErgodicSettings,
    pub bsde: BsdeSettings,
    pub policy: PolicySearchSettings,
    pub reduced: ReducedSettings,
    pub deterministic: DeterministicSettings,
    pub simulate_seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (a + b)];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn grids_must_descend() {
        let bad = ["epsilon_grid = [0.1, 0.2]", "eta_grid = [0.1, 0.0, 0.05]", "eta_grid = [0.0, 0.1]", "epsilon_grid = [0.1, 0.0]"];
        for b in bad {
            assert!(ExperimentConfig::from_toml(b).is_err(), "{b}");
        }
        let ok = ExperimentConfig::from_toml("eta_grid = [0.2, 0.1]").unwrap();
        assert!(!ok.has_zero_eta());
        assert_eq!(ok.positive_etas(), vec![0.2, 0.1]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("horizon = 2.0").is_err());
        assert!(ExperimentConfig::from_toml("[bsde]\nn_path = 3").is_err());
    }

    #[test]
    fn overrides_follow_the_preset_family() {
        let cfg = ExperimentConfig::from_toml("[model]\npreset = \"linear_toy\"\n[model.linear_toy]\nbeta = 0.4").unwrap();
        assert_eq!(cfg.model.build().unwrap().name, "linear_toy");
        let bad = ExperimentConfig::from_toml("[model]\npreset = \"linear_toy\"\n[model.reaction_diffusion]\nm = 2.0").unwrap();
        assert!(bad.model.build().is_err());
        let deg = ExperimentConfig::from_toml("[model]\npreset = \"degenerate_R0\"\n[model.reaction_diffusion]\nm = 2.0").unwrap();
        assert!(deg.model.build().unwrap().coeffs.r_is_zero());
    }

    #[test]
    fn master_seed_zero_keeps_section_seeds() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.seeded().bsde.seed, cfg.bsde.seed);
        let other = cfg.clone().with_seed(9).seeded();
        assert_ne!(other.bsde.seed, cfg.bsde.seed);
        assert_ne!(other.policy.train_seed, other.policy.eval_seed);
        assert_eq!(cfg.clone().with_seed(9).seeded().ergodic.seed, other.ergodic.seed);
    }

    #[test]
    fn z_axis_reaches_the_outer_radius() {
        let a = LambdaConfig::default().z_axis();
        assert_eq!(a.first(), Some(&-25.0));
        assert_eq!(a.last(), Some(&25.0));
        assert_eq!(a.len(), 121 + 44);
        assert!(a.windows(2).all(|w| w[1] > w[0]));
    }
}
