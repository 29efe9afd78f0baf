//! Least-squares regression on polynomial bases with per-variable
//! standardization.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

/// Monomials in `n_vars` variables given by exponent tuples.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolyBasis {
    pub n_vars: usize,
    pub exponents: Vec<Vec<u32>>,
}

impl PolyBasis {
    /// All monomials of total degree at most `degree`, constant first.
    pub fn total_degree(n_vars: usize, degree: u32) -> Self {
        let mut exponents = Vec::new();
        for d in 0..=degree {
            let mut cur = vec![0u32; n_vars];
            push_degree(&mut exponents, &mut cur, 0, d);
        }
        Self { n_vars, exponents }
    }

    pub fn from_exponents(n_vars: usize, exponents: Vec<Vec<u32>>) -> Result<Self> {
        if exponents.is_empty() || exponents.iter().any(|e| e.len() != n_vars) {
            return Err(config("basis exponents must be nonempty with one entry per variable"));
        }
        Ok(Self { n_vars, exponents })
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn descriptor(&self) -> String {
        let terms: Vec<String> = self
            .exponents
            .iter()
            .map(|e| e.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(""))
            .collect();
        format!("poly{}[{}]", self.n_vars, terms.join(","))
    }

    pub fn eval_into(&self, z: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = monomial(z, e);
        }
    }
}

fn push_degree(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, var: usize, left: u32) {
    if var + 1 == cur.len() {
        cur[var] = left;
        out.push(cur.clone());
        cur[var] = 0;
        return;
    }
    if cur.is_empty() {
        return;
    }
    for p in (0..=left).rev() {
        cur[var] = p;
        push_degree(out, cur, var + 1, left - p);
    }
    cur[var] = 0;
}

/// Per-variable mean and standard deviation, with scale 1 for variables that
/// do not vary.
fn standardization(vars: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = vars.len() / d;
    let mut mean = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for row in vars.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for row in vars.chunks_exact(d) {
        for k in 0..d {
            scale[k] += (row[k] - mean[k]).powi(2);
        }
    }
    for (s, m) in scale.iter_mut().zip(&mean) {
        *s = (*s / n as f64).sqrt();
        if !(*s > 1e-12 * (1.0 + m.abs())) {
            *s = 1.0;
        }
    }
    (mean, scale)
}

fn monomial(z: &[f64], e: &[u32]) -> f64 {
    let mut v = 1.0;
    for (zi, &p) in z.iter().zip(e) {
        if p > 0 {
            v *= zi.powi(p as i32);
        }
    }
    v
}

fn d_monomial(z: &[f64], e: &[u32], var: usize) -> f64 {
    let p = e[var];
    if p == 0 {
        return 0.0;
    }
    let mut v = p as f64;
    for (i, (zi, &q)) in z.iter().zip(e).enumerate() {
        let q = if i == var { q - 1 } else { q };
        if q > 0 {
            v *= zi.powi(q as i32);
        }
    }
    v
}

/// Variables are limited so predictions avoid allocation.
pub const MAX_VARS: usize = 8;

/// Condition floor on the standardized Gram matrix.
const RANK_TOL: f64 = 1e-11;

/// Fitted regression of several targets on one standardized basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub basis: PolyBasis,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// One coefficient vector per target.
    pub coef: Vec<Vec<f64>>,
}

impl Fit {
    /// Regresses each target column on the basis evaluated at the rows of
    /// `vars` (row-major, `n_vars` per row). `step` labels errors.
    pub fn fit(basis: &PolyBasis, vars: &[f64], targets: &[&[f64]], step: usize) -> Result<Fit> {
        Self::fit_ridge(basis, vars, targets, step, 0.0)
    }

    /// As `fit` with `ridge` added to the diagonal of the standardized Gram
    /// matrix (constant term excluded). A positive ridge skips the rank check.
    pub fn fit_ridge(
        basis: &PolyBasis,
        vars: &[f64],
        targets: &[&[f64]],
        step: usize,
        ridge: f64,
    ) -> Result<Fit> {
        let d = basis.n_vars;
        if d == 0 || d > MAX_VARS {
            return Err(config(format!("basis needs 1..={MAX_VARS} variables, got {d}")));
        }
        let n = vars.len() / d;
        if n * d != vars.len() || targets.iter().any(|t| t.len() != n) {
            return Err(config("regression inputs have inconsistent lengths"));
        }
        let p = basis.len();
        if n < p {
            return Err(Error::BasisDegenerate {
                step,
                detail: format!("{n} samples for {p} basis functions"),
            });
        }
        let (mean, scale) = standardization(vars, d);
        let mut gram = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DMatrix::<f64>::zeros(p, targets.len());
        let mut phi = vec![0.0; p];
        let mut z = vec![0.0; d];
        for (i, row) in vars.chunks_exact(d).enumerate() {
            for k in 0..d {
                z[k] = (row[k] - mean[k]) / scale[k];
            }
            basis.eval_into(&z, &mut phi);
            for a in 0..p {
                let pa = phi[a];
                for b in a..p {
                    gram[(a, b)] += pa * phi[b];
                }
                for (t, tv) in targets.iter().enumerate() {
                    rhs[(a, t)] += pa * tv[i];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        gram /= n as f64;
        rhs /= n as f64;
        if ridge > 0.0 {
            for (a, e) in basis.exponents.iter().enumerate() {
                if e.iter().any(|p| *p > 0) {
                    gram[(a, a)] += ridge;
                }
            }
        }
        let eig = gram.clone().symmetric_eigenvalues();
        let hi = eig.max();
        let lo = eig.min();
        if ridge == 0.0 && !(lo > RANK_TOL * hi) {
            return Err(Error::BasisDegenerate {
                step,
                detail: format!("Gram eigenvalue ratio {:.3e}", lo / hi),
            });
        }
        let chol = gram.cholesky().ok_or_else(|| Error::BasisDegenerate {
            step,
            detail: "Gram matrix not positive definite".into(),
        })?;
        let sol = chol.solve(&rhs);
        let coef = (0..targets.len())
            .map(|t| sol.column(t).iter().cloned().collect())
            .collect();
        Ok(Fit { basis: basis.clone(), mean, scale, coef })
    }

    /// Regresses `target` on the basis times each multiplier column, the
    /// first multiplier being the constant 1: `target ~ sum_i f_i(vars) m_i`.
    /// Returns one single-target fit per `f_i`, constant term first.
    /// `mults` is row-major with `n_mults` extra columns per row.
    pub fn fit_augmented(
        basis: &PolyBasis,
        vars: &[f64],
        mults: &[f64],
        n_mults: usize,
        target: &[f64],
        step: usize,
    ) -> Result<Vec<Fit>> {
        let d = basis.n_vars;
        if d == 0 || d > MAX_VARS {
            return Err(config(format!("basis needs 1..={MAX_VARS} variables, got {d}")));
        }
        let n = target.len();
        if vars.len() != n * d || mults.len() != n * n_mults {
            return Err(config("regression inputs have inconsistent lengths"));
        }
        let p = basis.len();
        let width = p * (1 + n_mults);
        if n < width {
            return Err(Error::BasisDegenerate {
                step,
                detail: format!("{n} samples for {width} design columns"),
            });
        }
        let (mean, scale) = standardization(vars, d);
        let mut gram = DMatrix::<f64>::zeros(width, width);
        let mut rhs = DMatrix::<f64>::zeros(width, 1);
        let mut phi = vec![0.0; p];
        let mut row = vec![0.0; width];
        let mut z = vec![0.0; d];
        for i in 0..n {
            for k in 0..d {
                z[k] = (vars[i * d + k] - mean[k]) / scale[k];
            }
            basis.eval_into(&z, &mut phi);
            row[..p].copy_from_slice(&phi);
            for m in 0..n_mults {
                let w = mults[i * n_mults + m];
                for j in 0..p {
                    row[(m + 1) * p + j] = phi[j] * w;
                }
            }
            for a in 0..width {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..width {
                    gram[(a, b)] += ra * row[b];
                }
                rhs[(a, 0)] += ra * target[i];
            }
        }
        for a in 0..width {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        gram /= n as f64;
        rhs /= n as f64;
        let eig = gram.clone().symmetric_eigenvalues();
        if !(eig.min() > RANK_TOL * eig.max()) {
            return Err(Error::BasisDegenerate {
                step,
                detail: format!("Gram eigenvalue ratio {:.3e}", eig.min() / eig.max()),
            });
        }
        let chol = gram.cholesky().ok_or_else(|| Error::BasisDegenerate {
            step,
            detail: "Gram matrix not positive definite".into(),
        })?;
        let sol = chol.solve(&rhs);
        Ok((0..=n_mults)
            .map(|m| Fit {
                basis: basis.clone(),
                mean: mean.clone(),
                scale: scale.clone(),
                coef: vec![sol.column(0).iter().skip(m * p).take(p).cloned().collect()],
            })
            .collect())
    }

    /// Multiplies every coefficient by `c`.
    pub fn scaled(mut self, c: f64) -> Fit {
        for t in &mut self.coef {
            t.iter_mut().for_each(|v| *v *= c);
        }
        self
    }

    fn standardize(&self, z: &[f64], out: &mut [f64]) {
        for k in 0..out.len() {
            out[k] = (z[k] - self.mean[k]) / self.scale[k];
        }
    }

    pub fn n_targets(&self) -> usize {
        self.coef.len()
    }

    pub fn predict(&self, z: &[f64], target: usize) -> f64 {
        let mut buf = [0.0; MAX_VARS];
        let s = &mut buf[..self.basis.n_vars];
        self.standardize(z, s);
        self.coef[target]
            .iter()
            .zip(&self.basis.exponents)
            .map(|(c, e)| c * monomial(s, e))
            .sum()
    }

    /// Partial derivative of the fitted function in original coordinates.
    pub fn gradient(&self, z: &[f64], target: usize, var: usize) -> f64 {
        let mut buf = [0.0; MAX_VARS];
        let s = &mut buf[..self.basis.n_vars];
        self.standardize(z, s);
        let g: f64 = self.coef[target]
            .iter()
            .zip(&self.basis.exponents)
            .map(|(c, e)| c * d_monomial(s, e, var))
            .sum();
        g / self.scale[var]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_degree_counts() {
        assert_eq!(PolyBasis::total_degree(3, 2).len(), 10);
        assert_eq!(PolyBasis::total_degree(2, 3).len(), 10);
        assert_eq!(PolyBasis::total_degree(1, 4).len(), 5);
        assert_eq!(PolyBasis::total_degree(2, 2).exponents[0], vec![0, 0]);
    }

    #[test]
    fn recovers_quadratic_and_gradient() {
        let basis = PolyBasis::total_degree(2, 2);
        let mut vars = Vec::new();
        let mut y = Vec::new();
        for i in 0..50 {
            for j in 0..7 {
                let a = i as f64 * 0.1 - 2.0;
                let b = j as f64 * 0.3;
                vars.extend([a, b]);
                y.push(1.0 + 2.0 * a - b + 0.5 * a * b + 3.0 * b * b);
            }
        }
        let fit = Fit::fit(&basis, &vars, &[&y], 0).unwrap();
        let z = [0.7, -0.4];
        let exact = 1.0 + 1.4 + 0.4 - 0.14 + 0.48;
        assert!((fit.predict(&z, 0) - exact).abs() < 1e-9);
        assert!((fit.gradient(&z, 0, 0) - (2.0 + 0.5 * -0.4)).abs() < 1e-9);
        assert!((fit.gradient(&z, 0, 1) - (-1.0 + 0.35 - 2.4)).abs() < 1e-9);
    }

    #[test]
    fn augmented_fit_separates_multipliers() {
        let basis = PolyBasis::total_degree(1, 1);
        let mut vars = Vec::new();
        let mut mults = Vec::new();
        let mut y = Vec::new();
        for i in 0..200 {
            let x = (i % 20) as f64 * 0.1;
            let w = ((i * 7919) % 13) as f64 - 6.0;
            vars.push(x);
            mults.push(w);
            y.push(1.0 + x + (0.5 - 2.0 * x) * w);
        }
        let fits = Fit::fit_augmented(&basis, &vars, &mults, 1, &y, 3).unwrap();
        assert_eq!(fits.len(), 2);
        assert!((fits[0].predict(&[0.7], 0) - 1.7).abs() < 1e-9);
        assert!((fits[1].predict(&[0.7], 0) - (0.5 - 1.4)).abs() < 1e-9);
        assert!((fits[1].clone().scaled(2.0).predict(&[0.7], 0) + 1.8).abs() < 1e-9);
    }

    #[test]
    fn collinear_design_is_reported() {
        let basis = PolyBasis::total_degree(2, 1);
        let vars: Vec<f64> = (0..20).flat_map(|i| [i as f64, 2.0 * i as f64]).collect();
        let y = vec![1.0; 20];
        match Fit::fit(&basis, &vars, &[&y], 7) {
            Err(Error::BasisDegenerate { step, .. }) => assert_eq!(step, 7),
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }
}
