//! Galerkin truncation of the state spaces.
//!
//! Vectors are stored as coordinates in an orthonormal eigenbasis, so the
//! Euclidean norm of the coordinates is the Hilbert norm. Both linear
//! operators are diagonal in that basis.

use std::f64::consts::PI;
use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{argument, config, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ModeVector {
    pub coeffs: Vec<f64>,
}

impl ModeVector {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn zeros(n: usize) -> Self {
        Self { coeffs: vec![0.0; n] }
    }

    /// Unit vector along mode `k` (zero based).
    pub fn unit(n: usize, k: usize) -> Self {
        let mut v = Self::zeros(n);
        v.coeffs[k] = 1.0;
        v
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coeffs)
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    pub fn check_dim(&self, expected: usize, what: &str) -> Result<()> {
        if self.dim() != expected {
            return Err(config(format!(
                "{what}: expected {expected} modes, got {}",
                self.dim()
            )));
        }
        if !self.is_finite() {
            return Err(config(format!("{what}: non-finite coordinate")));
        }
        Ok(())
    }
}

impl Deref for ModeVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.coeffs
    }
}

impl DerefMut for ModeVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }
}

impl From<Vec<f64>> for ModeVector {
    fn from(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorLabel {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalSemigroup {
    pub eigenvalues: Vec<f64>,
    pub label: OperatorLabel,
}

impl DiagonalSemigroup {
    pub fn new(eigenvalues: Vec<f64>, label: OperatorLabel) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(config("semigroup needs at least one mode"));
        }
        if eigenvalues.iter().any(|e| !e.is_finite()) {
            return Err(config("non-finite eigenvalue"));
        }
        Ok(Self { eigenvalues, label })
    }

    /// Dirichlet Laplacian on [0,1] scaled by `diffusivity` and shifted by
    /// `-shift`: eigenvalues `-(diffusivity k^2 pi^2 + shift)`, k = 1..=n.
    pub fn laplacian(n: usize, diffusivity: f64, shift: f64, label: OperatorLabel) -> Result<Self> {
        let eig = (1..=n)
            .map(|k| -(diffusivity * (k * k) as f64 * PI * PI + shift))
            .collect();
        Self::new(eig, label)
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn apply(&self, t: f64, v: &ModeVector) -> Result<ModeVector> {
        if !(t >= 0.0) {
            return Err(argument(format!("semigroup time must be nonnegative, got {t}")));
        }
        if v.dim() != self.dim() {
            return Err(config(format!(
                "semigroup {:?} has {} modes, vector has {}",
                self.label,
                self.dim(),
                v.dim()
            )));
        }
        let coeffs = v
            .iter()
            .zip(&self.eigenvalues)
            .map(|(c, e)| c * (e * t).exp())
            .collect();
        Ok(ModeVector { coeffs })
    }

    /// Hilbert-Schmidt norm of `e^{sA}` on the truncated space.
    pub fn hs_norm(&self, s: f64) -> f64 {
        self.eigenvalues
            .iter()
            .map(|e| (2.0 * e * s).exp())
            .sum::<f64>()
            .sqrt()
    }

    /// Largest eigenvalue; the semigroup contracts at rate `-max_eigenvalue`.
    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-mode coefficients of one exponential-Euler step of `dy = (lam y + g) dt + s dW`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeStep {
    /// `exp(lam dt)`
    pub decay: f64,
    /// `(exp(lam dt) - 1) / lam`, the exact weight of a frozen drift.
    pub drift_weight: f64,
    /// Multiplier turning an `N(0, dt)` increment into a sample of the exact
    /// stochastic convolution over the step.
    pub noise_factor: f64,
}

impl ModeStep {
    pub fn new(lam: f64, dt: f64) -> Self {
        let z = lam * dt;
        let drift_weight = if z.abs() < 1e-12 { dt } else { z.exp_m1() / lam };
        let var = if z.abs() < 1e-12 {
            dt
        } else {
            (2.0 * z).exp_m1() / (2.0 * lam)
        };
        Self {
            decay: z.exp(),
            drift_weight,
            noise_factor: (var / dt).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoiseStream {
    W1,
    W2,
    B,
    Aux(u8),
}

impl NoiseStream {
    pub fn id(self) -> u64 {
        match self {
            NoiseStream::W1 => 1,
            NoiseStream::W2 => 2,
            NoiseStream::B => 3,
            NoiseStream::Aux(k) => 16 + k as u64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub n_noise: usize,
    pub seed: u64,
    pub stream: NoiseStream,
}

impl NoiseSpec {
    pub fn new(n_noise: usize, seed: u64, stream: NoiseStream) -> Self {
        Self { n_noise, seed, stream }
    }

    /// Increment number `step` of path `path`, each coordinate `N(0, dt)`.
    pub fn increment(&self, path: u64, step: u64, dt: f64) -> Result<ModeVector> {
        if !(dt > 0.0) {
            return Err(argument(format!("increment needs dt > 0, got {dt}")));
        }
        let mut out = vec![0.0; self.n_noise];
        self.source(path).fill(step, dt, &mut out);
        Ok(ModeVector { coeffs: out })
    }

    pub fn source(&self, path: u64) -> BrownianSource {
        BrownianSource::new(self.seed, self.stream, path, self.n_noise)
    }
}

/// Random-access Gaussian increments for one (seed, stream, path).
///
/// ChaCha is a counter-mode cipher: the key comes from the seed, the 64-bit
/// stream selector from (stream, path), and the word position from the step,
/// so any increment can be regenerated in isolation.
#[derive(Clone, Debug)]
pub struct BrownianSource {
    rng: ChaCha8Rng,
    n: usize,
    words_per_step: u128,
}

impl BrownianSource {
    pub fn new(seed: u64, stream: NoiseStream, path: u64, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((path << 8) ^ stream.id());
        // two f64 draws (four 32-bit words) per Gaussian pair
        let words_per_step = 4 * n.div_ceil(2) as u128;
        Self { rng, n, words_per_step }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn standard_normals(&mut self, step: u64, out: &mut [f64], accumulate: bool) {
        self.rng.set_word_pos(step as u128 * self.words_per_step);
        let mut k = 0;
        while k < self.n {
            let u1 = 1.0 - self.rng.random::<f64>();
            let u2 = self.rng.random::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (2.0 * PI * u2).sin_cos();
            let pair = [r * c, r * s];
            for z in pair {
                if k < self.n {
                    if accumulate {
                        out[k] += z;
                    } else {
                        out[k] = z;
                    }
                    k += 1;
                }
            }
        }
    }

    /// Writes increment `step` with variance `dt` per coordinate.
    pub fn fill(&mut self, step: u64, dt: f64, out: &mut [f64]) {
        self.standard_normals(step, out, false);
        let s = dt.sqrt();
        out.iter_mut().for_each(|v| *v *= s);
    }

    /// Sum of `count` consecutive base increments starting at `first`, each of
    /// variance `base_dt`. Coarse grids built this way share one Brownian path.
    pub fn fill_sum(&mut self, first: u64, count: u64, base_dt: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..count {
            self.standard_normals(first + j, out, true);
        }
        let s = base_dt.sqrt();
        out.iter_mut().for_each(|v| *v *= s);
    }
}

/// Dirichlet sine transform on the uniform interior grid `xi_j = j/(N+1)`.
///
/// `forward` returns amplitudes `c_k` with `f(xi) = sum_k c_k sin(k pi xi)`;
/// `to_modes`/`from_modes` use the orthonormal basis `sqrt(2) sin(k pi xi)`.
#[derive(Clone, Debug)]
pub struct SineTransform {
    n_points: usize,
    n_modes: usize,
    // sin(k pi xi_j), row-major by mode
    table: Vec<f64>,
}

impl SineTransform {
    pub fn new(n_points: usize, n_modes: usize) -> Result<Self> {
        if n_points == 0 || n_modes == 0 {
            return Err(config("sine transform needs at least one point and one mode"));
        }
        if n_modes > n_points {
            return Err(config(format!(
                "{n_modes} modes cannot be resolved on {n_points} grid points"
            )));
        }
        let h = 1.0 / (n_points + 1) as f64;
        let mut table = Vec::with_capacity(n_points * n_modes);
        for k in 1..=n_modes {
            for j in 1..=n_points {
                table.push((k as f64 * PI * j as f64 * h).sin());
            }
        }
        Ok(Self { n_points, n_modes, table })
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn grid(&self) -> Vec<f64> {
        let h = 1.0 / (self.n_points + 1) as f64;
        (1..=self.n_points).map(|j| j as f64 * h).collect()
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.table[k * self.n_points..(k + 1) * self.n_points]
    }

    pub fn forward(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.n_points {
            return Err(config(format!(
                "expected {} grid values, got {}",
                self.n_points,
                values.len()
            )));
        }
        let w = 2.0 / (self.n_points + 1) as f64;
        Ok((0..self.n_modes).map(|k| w * dot(self.row(k), values)).collect())
    }

    pub fn inverse(&self, amplitudes: &[f64]) -> Result<Vec<f64>> {
        if amplitudes.len() != self.n_modes {
            return Err(config(format!(
                "expected {} amplitudes, got {}",
                self.n_modes,
                amplitudes.len()
            )));
        }
        let mut out = vec![0.0; self.n_points];
        self.synthesize(amplitudes, 1.0, &mut out);
        Ok(out)
    }

    /// Grid values of the field with orthonormal coordinates `modes`.
    pub fn from_modes_into(&self, modes: &[f64], out: &mut [f64]) {
        self.synthesize(modes, std::f64::consts::SQRT_2, out);
    }

    /// Orthonormal coordinates of the discrete projection of `values`.
    pub fn to_modes_into(&self, values: &[f64], out: &mut [f64]) {
        let w = std::f64::consts::SQRT_2 / (self.n_points + 1) as f64;
        for (k, o) in out.iter_mut().enumerate().take(self.n_modes) {
            *o = w * dot(self.row(k), values);
        }
    }

    fn synthesize(&self, coeffs: &[f64], scale: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, &c) in coeffs.iter().enumerate().take(self.n_modes) {
            if c == 0.0 {
                continue;
            }
            let c = c * scale;
            for (o, s) in out.iter_mut().zip(self.row(k)) {
                *o += c * s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn semigroup_scalar_examples() {
        let sg = DiagonalSemigroup::new(vec![-1.0], OperatorLabel::A).unwrap();
        let v = ModeVector::new(vec![2.0]);
        assert_eq!(sg.apply(0.0, &v).unwrap().coeffs, vec![2.0]);
        let r = sg.apply(0.5, &v).unwrap();
        assert!((r[0] - 1.213_061_319_425_267).abs() < 1e-12);
        assert!(sg.apply(-1.0, &v).is_err());
        assert!(sg.apply(1.0, &ModeVector::zeros(2)).is_err());
    }

    #[test]
    fn mode_step_limits() {
        let s = ModeStep::new(0.0, 0.1);
        assert_eq!(s.decay, 1.0);
        assert_eq!(s.drift_weight, 0.1);
        assert!((s.noise_factor - 1.0).abs() < 1e-15);
        // stiff mode: stationary variance lam-independent of dt
        let lam = -500.0;
        let s = ModeStep::new(lam, 0.01);
        let var = s.noise_factor.powi(2) * 0.01;
        assert!((var - (1.0 - (2.0 * lam * 0.01).exp()) / (-2.0 * lam)).abs() < 1e-15);
    }

    #[test]
    fn increments_are_keyed() {
        let spec = NoiseSpec::new(5, 42, NoiseStream::W1);
        let a = spec.increment(3, 17, 0.01).unwrap();
        let b = spec.increment(3, 17, 0.01).unwrap();
        assert_eq!(a, b);
        let mut src = spec.source(3);
        let mut buf = vec![0.0; 5];
        src.fill(16, 0.01, &mut buf);
        src.fill(17, 0.01, &mut buf);
        assert_eq!(buf, a.coeffs);
        let c = spec.increment(4, 17, 0.01).unwrap();
        assert_ne!(a, c);
        assert!(spec.increment(0, 0, 0.0).is_err());
    }

    #[test]
    fn fill_sum_matches_manual_sum() {
        let mut src = BrownianSource::new(7, NoiseStream::B, 0, 3);
        let mut total = vec![0.0; 3];
        let mut one = vec![0.0; 3];
        for j in 10..14 {
            src.fill(j, 0.25, &mut one);
            for k in 0..3 {
                total[k] += one[k];
            }
        }
        let mut summed = vec![0.0; 3];
        src.fill_sum(10, 4, 0.25, &mut summed);
        for k in 0..3 {
            assert!((summed[k] - total[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn sine_transform_eigenfunction() {
        let st = SineTransform::new(63, 63).unwrap();
        let vals: Vec<f64> = st.grid().iter().map(|x| (PI * x).sin()).collect();
        let c = st.forward(&vals).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-10);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-10));
        let zero = st.forward(&vec![0.0; 63]).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        assert!(SineTransform::new(4, 8).is_err());
        assert!(st.forward(&[0.0; 10]).is_err());
    }

    #[test]
    fn orthonormal_coordinates_are_isometric() {
        let st = SineTransform::new(31, 6).unwrap();
        let modes = [0.3, -1.0, 0.2, 0.0, 0.5, -0.1];
        let mut vals = vec![0.0; 31];
        st.from_modes_into(&modes, &mut vals);
        let mut back = vec![0.0; 6];
        st.to_modes_into(&vals, &mut back);
        for k in 0..6 {
            assert!((back[k] - modes[k]).abs() < 1e-12);
        }
        let discrete_l2 = (vals.iter().map(|v| v * v).sum::<f64>() / 32.0).sqrt();
        assert!((discrete_l2 - norm(&modes)).abs() < 1e-12);
    }
}
