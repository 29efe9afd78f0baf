//! Problem coefficients and their structural checks.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, Result};
use crate::spectral::{dot, norm, DiagonalSemigroup};

/// Nonlinear coefficients of the two-scale system.
///
/// Slices are mode coordinates: `x` has `n_slow` entries, `q` has `n_fast`,
/// control points `u` have whatever length the control set uses.
pub trait Coefficients: Send + Sync + fmt::Debug {
    /// Slow drift `b(x, q, u)` into `out` (length `n_slow`).
    fn b(&self, x: &[f64], q: &[f64], u: &[f64], out: &mut [f64]);
    /// Fast nonlinearity `F(x, q)` into `out` (length `n_fast`).
    fn f(&self, x: &[f64], q: &[f64], out: &mut [f64]);
    /// Mode-wise multipliers of `R(x)`: noise mode `k` drives slow mode `k`.
    fn r(&self, x: &[f64], out: &mut [f64]);
    /// Fast control channel `rho(u)` into `out` (length `n_noise`).
    fn rho(&self, u: &[f64], out: &mut [f64]);
    fn l(&self, x: &[f64], q: &[f64], u: &[f64]) -> f64;
    fn h(&self, x: &[f64]) -> f64;
    /// Stable text identifying the parameters, used for fingerprints.
    fn descriptor(&self) -> String;
    /// Descriptor restricted to what the frozen fast problem sees.
    fn ergodic_descriptor(&self) -> String {
        self.descriptor()
    }
    /// True when `R` vanishes identically.
    fn r_is_zero(&self) -> bool {
        false
    }
}

/// Upper limit on the truncation dimensions; hot loops use stack scratch of
/// this size.
pub const MAX_MODES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    /// Uniform bound on `|b|, |l|, |h|, |rho|`.
    pub m: f64,
    /// Lipschitz constant of `b, F, l, h, R`.
    pub lip: f64,
    /// Dissipativity rate of `B + F`.
    pub mu: f64,
    /// Hilbert-Schmidt blow-up exponent of the semigroups at 0.
    pub gamma: f64,
}

#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub slow_op: DiagonalSemigroup,
    pub fast_op: DiagonalSemigroup,
    /// Mode-wise multipliers of `G`.
    pub g: Vec<f64>,
    pub n_noise: usize,
    pub controls: Vec<Vec<f64>>,
    pub constants: Constants,
    /// Number of leading slow modes spanned by the range of `b`.
    pub active_dim: usize,
    pub x0: Vec<f64>,
    pub q0: Vec<f64>,
    pub coeffs: Arc<dyn Coefficients>,
    rho_table: Vec<Vec<f64>>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("n_slow", &self.n_slow())
            .field("n_fast", &self.n_fast())
            .field("n_noise", &self.n_noise)
            .field("controls", &self.controls.len())
            .field("constants", &self.constants)
            .field("active_dim", &self.active_dim)
            .finish()
    }
}

#[derive(Clone, Debug)]
pub struct ModelParts {
    pub name: String,
    pub slow_op: DiagonalSemigroup,
    pub fast_op: DiagonalSemigroup,
    pub g: Vec<f64>,
    pub n_noise: usize,
    pub controls: Vec<Vec<f64>>,
    pub constants: Constants,
    pub active_dim: usize,
    pub x0: Vec<f64>,
    pub q0: Vec<f64>,
}

impl ModelSpec {
    pub fn new(parts: ModelParts, coeffs: Arc<dyn Coefficients>) -> Result<Self> {
        let ModelParts {
            name,
            slow_op,
            fast_op,
            g,
            n_noise,
            controls,
            constants,
            active_dim,
            x0,
            q0,
        } = parts;
        let n_slow = slow_op.dim();
        let n_fast = fast_op.dim();
        if controls.is_empty() {
            return Err(config("control set U is empty"));
        }
        if n_slow > MAX_MODES || n_fast > MAX_MODES {
            return Err(config(format!("at most {MAX_MODES} modes per space are supported")));
        }
        if n_noise != n_fast {
            return Err(config(format!(
                "noise dimension {n_noise} must equal fast dimension {n_fast}"
            )));
        }
        if n_noise < n_slow {
            return Err(config(format!(
                "noise dimension {n_noise} cannot drive {n_slow} slow modes"
            )));
        }
        if g.len() != n_fast {
            return Err(config("G multipliers must match the fast dimension"));
        }
        if active_dim == 0 || active_dim > n_slow.min(2) {
            return Err(config(format!(
                "active dimension must be 1 or 2 and at most n_slow, got {active_dim}"
            )));
        }
        if x0.len() != n_slow || q0.len() != n_fast {
            return Err(config("initial state dimensions do not match the model"));
        }
        let c = constants;
        if !(c.m > 0.0 && c.lip > 0.0 && c.mu > 0.0 && c.gamma > 0.0 && c.gamma < 0.5) {
            return Err(config(format!("constants out of range: {c:?}")));
        }
        let rho_table = controls
            .iter()
            .map(|u| {
                let mut out = vec![0.0; n_noise];
                coeffs.rho(u, &mut out);
                out
            })
            .collect();
        Ok(Self {
            name,
            slow_op,
            fast_op,
            g,
            n_noise,
            controls,
            constants,
            active_dim,
            x0,
            q0,
            coeffs,
            rho_table,
        })
    }

    pub fn n_slow(&self) -> usize {
        self.slow_op.dim()
    }

    pub fn n_fast(&self) -> usize {
        self.fast_op.dim()
    }

    pub fn n_controls(&self) -> usize {
        self.controls.len()
    }

    /// `rho(u_i)`, precomputed.
    pub fn rho_of(&self, i: usize) -> &[f64] {
        &self.rho_table[i]
    }

    pub fn with_initial_state(&self, x0: Vec<f64>, q0: Vec<f64>) -> Result<Self> {
        if x0.len() != self.n_slow() || q0.len() != self.n_fast() {
            return Err(config("initial state dimensions do not match the model"));
        }
        let mut m = self.clone();
        m.x0 = x0;
        m.q0 = q0;
        Ok(m)
    }

    fn parts_text(&self) -> String {
        format!(
            "{}|A{:?}|B{:?}|G{:?}|U{:?}|C{:?}|d{}",
            self.name,
            self.slow_op.eigenvalues,
            self.fast_op.eigenvalues,
            self.g,
            self.controls,
            self.constants,
            self.active_dim
        )
    }

    /// Hash of every model ingredient including the initial state.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(&format!(
            "{}|{}|x0{:?}|q0{:?}",
            self.parts_text(),
            self.coeffs.descriptor(),
            self.x0,
            self.q0
        ))
    }

    /// Hash of the ingredients of the frozen fast problem only.
    pub fn ergodic_fingerprint(&self) -> String {
        fingerprint_of(&format!(
            "B{:?}|G{:?}|U{:?}|M{}|{}",
            self.fast_op.eigenvalues,
            self.g,
            self.controls,
            self.constants.m,
            self.coeffs.ergodic_descriptor()
        ))
    }

    /// Runs every structural check on a random validation sample.
    pub fn validate(&self, n_samples: usize, seed: u64) -> ValidationReport {
        validate(self, n_samples, seed)
    }
}

pub fn fingerprint_of(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub observed: f64,
    /// Threshold the observation is compared against.
    pub limit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    /// Observed dissipativity rate minus the declared `mu`.
    pub dissipativity_margin: f64,
    /// `b`, `F`, `l` see the slow state only through its first coordinate.
    pub leading_mode_only: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

const LIP_TOLERANCE: f64 = 1.05;

fn sample_state(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|k| scale * rng.random_range(-1.0..1.0) / (k + 1) as f64)
        .collect()
}

fn perturb(rng: &mut ChaCha8Rng, v: &[f64], size: f64) -> Vec<f64> {
    v.iter().map(|c| c + size * rng.random_range(-1.0..1.0)).collect()
}

fn joint_dist(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        + c.iter().zip(d).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    s.sqrt()
}

fn validate(model: &ModelSpec, n_samples: usize, seed: u64) -> ValidationReport {
    let c = model.constants;
    let (ns, nf) = (model.n_slow(), model.n_fast());
    let co = &model.coeffs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bound = 0.0f64;
    let mut lip_b = 0.0f64;
    let mut lip_f = 0.0f64;
    let mut lip_l = 0.0f64;
    let mut lip_h = 0.0f64;
    let mut lip_r = 0.0f64;
    let mut diss = f64::NEG_INFINITY;
    let mut lead_only = 0.0f64;
    let (mut b1, mut b2) = (vec![0.0; ns], vec![0.0; ns]);
    let (mut f1, mut f2) = (vec![0.0; nf], vec![0.0; nf]);
    let (mut r1, mut r2) = (vec![0.0; ns], vec![0.0; ns]);
    for i in 0..model.n_controls() {
        bound = bound.max(norm(model.rho_of(i)));
    }
    for s in 0..n_samples {
        let scale = if s % 2 == 0 { 1.0 } else { 4.0 };
        let x = sample_state(&mut rng, ns, scale);
        let q = sample_state(&mut rng, nf, scale);
        let size = if s % 3 == 0 { 1e-3 } else { 0.2 };
        let x2 = perturb(&mut rng, &x, size);
        let q2 = perturb(&mut rng, &q, size);
        let u = &model.controls[s % model.n_controls()];
        co.b(&x, &q, u, &mut b1);
        co.b(&x2, &q2, u, &mut b2);
        let l1 = co.l(&x, &q, u);
        let l2 = co.l(&x2, &q2, u);
        let h1 = co.h(&x);
        let h2 = co.h(&x2);
        bound = bound.max(norm(&b1)).max(l1.abs()).max(h1.abs());
        let dxq = joint_dist(&x, &x2, &q, &q2);
        let dx = joint_dist(&x, &x2, &[], &[]);
        if dxq > 0.0 {
            let db = joint_dist(&b1, &b2, &[], &[]);
            lip_b = lip_b.max(db / dxq);
            lip_l = lip_l.max((l1 - l2).abs() / dxq);
            co.f(&x, &q, &mut f1);
            co.f(&x2, &q2, &mut f2);
            lip_f = lip_f.max(joint_dist(&f1, &f2, &[], &[]) / dxq);
        }
        if dx > 0.0 {
            lip_h = lip_h.max((h1 - h2).abs() / dx);
            co.r(&x, &mut r1);
            co.r(&x2, &mut r2);
            lip_r = lip_r.max(joint_dist(&r1, &r2, &[], &[]) / dx);
        }
        // dissipativity of B + F in q at frozen x
        let dq: Vec<f64> = q.iter().zip(&q2).map(|(a, b)| a - b).collect();
        let nq2 = dot(&dq, &dq);
        if nq2 > 0.0 {
            co.f(&x, &q, &mut f1);
            co.f(&x, &q2, &mut f2);
            let mut inner = 0.0;
            for k in 0..nf {
                inner += (model.fast_op.eigenvalues[k] * dq[k] + f1[k] - f2[k]) * dq[k];
            }
            diss = diss.max(inner / nq2);
        }
        // coefficients seen by the ergodic problem depend on x through x_1 only
        if ns > 1 {
            let mut xt = x.clone();
            for v in xt.iter_mut().skip(1) {
                *v += rng.random_range(-1.0..1.0);
            }
            co.b(&xt, &q, u, &mut b2);
            co.b(&x, &q, u, &mut b1);
            co.f(&xt, &q, &mut f2);
            co.f(&x, &q, &mut f1);
            let dev = joint_dist(&b1, &b2, &f1, &f2) + (co.l(&xt, &q, u) - l1).abs();
            lead_only = lead_only.max(dev);
        }
    }
    let lim = c.lip * LIP_TOLERANCE;
    let mut checks = vec![
        Check {
            name: "bound".into(),
            passed: bound <= c.m * (1.0 + 1e-12),
            observed: bound,
            limit: c.m,
        },
        Check { name: "lipschitz_b".into(), passed: lip_b <= lim, observed: lip_b, limit: lim },
        Check { name: "lipschitz_f".into(), passed: lip_f <= lim, observed: lip_f, limit: lim },
        Check { name: "lipschitz_l".into(), passed: lip_l <= lim, observed: lip_l, limit: lim },
        Check { name: "lipschitz_h".into(), passed: lip_h <= lim, observed: lip_h, limit: lim },
        Check { name: "lipschitz_r".into(), passed: lip_r <= lim, observed: lip_r, limit: lim },
        Check {
            name: "dissipativity".into(),
            passed: diss <= -c.mu + 1e-9,
            observed: -diss,
            limit: c.mu,
        },
    ];
    let fast_max = model.fast_op.max_eigenvalue();
    checks.push(Check {
        name: "fast_spectrum".into(),
        passed: fast_max <= -c.mu,
        observed: -fast_max,
        limit: c.mu,
    });
    let hs = hs_decay_constant(&model.slow_op, &model.fast_op, c.gamma);
    checks.push(Check {
        name: "hs_decay".into(),
        passed: hs.is_finite(),
        observed: hs,
        limit: f64::INFINITY,
    });
    ValidationReport {
        checks,
        dissipativity_margin: -diss - c.mu,
        leading_mode_only: lead_only <= 1e-12,
    }
}

/// `sup_s (|e^{sA}|_HS + |e^{sB}|_HS) s^gamma` over `s` in `[1e-4, 1]`.
pub fn hs_decay_constant(a: &DiagonalSemigroup, b: &DiagonalSemigroup, gamma: f64) -> f64 {
    (0..=80)
        .map(|i| {
            let s = 10f64.powf(-4.0 + 4.0 * i as f64 / 80.0);
            (a.hs_norm(s) + b.hs_norm(s)) * s.powf(gamma)
        })
        .fold(0.0, f64::max)
}
