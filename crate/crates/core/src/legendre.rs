//! Truncated driver, its concave conjugate and the recovery map.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::ergodic::{locate, z_point, AuditReport, LambdaTable, Tally, MAX_ACTIVE};
use crate::model::{fingerprint_of, ModelSpec};
use crate::spectral::{dot, norm};

/// Value of the conjugate outside the ball `|alpha| <= M + 1`.
pub const NEG_INF: f64 = f64::NEG_INFINITY;

/// Radius doublings allowed before a search is declared too coarse.
pub const MAX_DOUBLINGS: usize = 3;

/// Floor on `a` when the Lipschitz estimate vanishes.
pub const A_MIN: f64 = 0.1;

/// Something that evaluates `lambda(x, z)`.
pub trait DriverEval: Sync {
    fn eval(&self, x: &[f64], z: &[f64]) -> Result<f64>;
}

impl<F> DriverEval for F
where
    F: Fn(&[f64], &[f64]) -> Result<f64> + Sync,
{
    fn eval(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        self(x, z)
    }
}

impl DriverEval for LambdaTable {
    fn eval(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        self.interpolate(x[0], z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationParams {
    pub m: f64,
    pub kappa: f64,
    /// Uniform bound on the gradient of the regularized value in `x`.
    pub a: f64,
}

impl TruncationParams {
    pub fn new(m: f64, kappa: f64, a: f64) -> Result<Self> {
        if !(m > 0.0 && a > 0.0 && kappa.is_finite()) {
            return Err(config("truncation needs M > 0, a > 0 and finite kappa"));
        }
        if !(kappa > m) {
            return Err(config(format!("kappa = {kappa} must exceed M = {m}")));
        }
        if !((kappa - m) / (2.0 * m + 1.0) > a) {
            return Err(config(format!(
                "(kappa - M)/(2M + 1) = {} must exceed a = {a}",
                (kappa - m) / (2.0 * m + 1.0)
            )));
        }
        Ok(Self { m, kappa, a })
    }

    /// `|z|` up to which the truncation leaves `lambda` untouched.
    pub fn identity_radius(&self) -> f64 {
        (self.kappa - self.m) / (2.0 * self.m + 1.0)
    }

    /// `|z|` beyond which the truncation is the cone alone.
    pub fn cone_radius(&self) -> f64 {
        self.kappa + self.m
    }

    /// Radius of the admissible control ball.
    pub fn alpha_radius(&self) -> f64 {
        self.m + 1.0
    }

    fn cone(&self, zn: f64) -> f64 {
        self.kappa - (self.m + 1.0) * zn
    }
}

/// `min(lambda(x, z), kappa - (M + 1)|z|)`, with `lambda` consulted only
/// where the minimum can depend on it.
pub fn tilde_lambda(lambda: &dyn DriverEval, p: &TruncationParams, x: &[f64], z: &[f64]) -> Result<f64> {
    let zn = norm(z);
    if zn >= p.cone_radius() {
        return Ok(p.cone(zn));
    }
    let l = lambda.eval(x, z)?;
    if zn <= p.identity_radius() {
        return Ok(l);
    }
    Ok(l.min(p.cone(zn)))
}

/// `a = max(1.5 L_v, 0.1)` and `kappa = M + (2M + 1) 2a`, from an estimate
/// `L_v` of the Lipschitz constant of the regularized value in `x`.
pub fn choose_kappa(model: &ModelSpec, lipschitz: f64) -> Result<TruncationParams> {
    if !(lipschitz.is_finite() && lipschitz >= 0.0) {
        return Err(config(format!("degenerate Lipschitz estimate {lipschitz}")));
    }
    let m = model.constants.m;
    let a = (1.5 * lipschitz).max(A_MIN);
    TruncationParams::new(m, m + (2.0 * m + 1.0) * 2.0 * a, a)
}

/// Search grid for the infimum over `z`: a box lattice with `points` nodes
/// per axis, restricted to the ball of radius `radius`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StarGrid {
    pub radius: f64,
    pub points: usize,
}

impl StarGrid {
    pub fn new(radius: f64, points: usize) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) || points < 3 {
            return Err(config("search grid needs a positive radius and at least 3 points"));
        }
        Ok(Self { radius, points })
    }

    fn axis(&self, radius: f64) -> Vec<f64> {
        linspace(-radius, radius, self.points)
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (a + b)];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Lattice points in a ball with the values of the truncated driver.
struct ZCloud {
    dim: usize,
    pts: Vec<f64>,
    vals: Vec<f64>,
    boundary: Vec<bool>,
}

impl ZCloud {
    fn build<T>(tilde: T, dim: usize, axis: &[f64]) -> Result<Self>
    where
        T: Fn(&[f64]) -> Result<f64>,
    {
        let radius = axis[axis.len() - 1];
        let h = axis[1] - axis[0];
        let axes = vec![axis.to_vec(); dim];
        let total = axis.len().pow(dim as u32);
        let mut cloud = ZCloud { dim, pts: Vec::new(), vals: Vec::new(), boundary: Vec::new() };
        for iz in 0..total {
            let z = z_point(&axes, iz);
            let zn = norm(&z);
            if zn > radius * (1.0 + 1e-12) {
                continue;
            }
            cloud.vals.push(tilde(&z)?);
            cloud.boundary.push(zn > radius - 1.5 * h);
            cloud.pts.extend_from_slice(&z);
        }
        Ok(cloud)
    }

    fn len(&self) -> usize {
        self.vals.len()
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.pts[i * self.dim..(i + 1) * self.dim]
    }

    /// Minimum of `-z alpha - tilde(z)`; `None` if only the rim attains it.
    fn star(&self, alpha: &[f64]) -> Option<f64> {
        let mut inner = f64::INFINITY;
        let mut rim = f64::INFINITY;
        for i in 0..self.len() {
            let v = -dot(self.point(i), alpha) - self.vals[i];
            if self.boundary[i] {
                rim = rim.min(v);
            } else {
                inner = inner.min(v);
            }
        }
        if rim < inner - 1e-12 * (1.0 + inner.abs()) {
            None
        } else {
            Some(inner.min(rim))
        }
    }
}

/// Concave conjugate `inf_z { -z alpha - tilde(z) }` by lattice search,
/// `NEG_INF` outside the ball `|alpha| <= M + 1`. The search radius doubles
/// while the minimum sits on the rim of the lattice.
pub fn legendre_star<T>(tilde: T, m: f64, alpha: &[f64], grid: &StarGrid) -> Result<f64>
where
    T: Fn(&[f64]) -> Result<f64>,
{
    if norm(alpha) > m + 1.0 {
        return Ok(NEG_INF);
    }
    let mut radius = grid.radius;
    for doubling in 0..=MAX_DOUBLINGS {
        let cloud = ZCloud::build(&tilde, alpha.len(), &grid.axis(radius))?;
        if let Some(v) = cloud.star(alpha) {
            return Ok(v);
        }
        if doubling < MAX_DOUBLINGS {
            log::warn!("conjugate search hit the rim at radius {radius}; doubling");
        }
        radius *= 2.0;
    }
    Err(Error::SearchTooCoarse { alpha: alpha.to_vec(), doublings: MAX_DOUBLINGS })
}

/// `lambda~*(x, alpha)` on `x_grid` times a box lattice of `alpha` axes over
/// `[-(M+1), M+1]`; cells outside the ball hold `NEG_INF`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegendreTable {
    pub x_grid: Vec<f64>,
    pub alpha_axes: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub params: TruncationParams,
    /// Points per axis of the `z` lattice.
    pub z_points: usize,
    /// Final search radius per `x` node.
    pub search_radius: Vec<f64>,
    pub fingerprint: String,
}

pub fn build_legendre_table(
    lambda: &dyn DriverEval,
    x_grid: &[f64],
    active_dim: usize,
    params: &TruncationParams,
    alpha_points: usize,
    grid: &StarGrid,
) -> Result<LegendreTable> {
    if x_grid.is_empty() || x_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(config("x grid must be nonempty and strictly increasing"));
    }
    if active_dim == 0 || active_dim > MAX_ACTIVE {
        return Err(Error::Unsupported(format!("active dimension must be 1..={MAX_ACTIVE}")));
    }
    if alpha_points < 2 {
        return Err(config("alpha axes need at least 2 points"));
    }
    if grid.radius < params.cone_radius() {
        return Err(config(format!(
            "search radius {} below kappa + M = {}",
            grid.radius,
            params.cone_radius()
        )));
    }
    let ra = params.alpha_radius();
    let axis = linspace(-ra, ra, alpha_points);
    let alpha_axes = vec![axis; active_dim];
    let n_alpha = alpha_points.pow(active_dim as u32);
    let alphas: Vec<Vec<f64>> = (0..n_alpha).map(|i| z_point(&alpha_axes, i)).collect();
    let columns: Vec<(Vec<f64>, f64)> = x_grid
        .par_iter()
        .map(|&x1| star_column(lambda, x1, active_dim, params, &alphas, grid))
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(x_grid.len() * n_alpha);
    let mut search_radius = Vec::with_capacity(x_grid.len());
    for (col, r) in columns {
        values.extend(col);
        search_radius.push(r);
    }
    let fingerprint = fingerprint_of(&format!(
        "{x_grid:?}|{params:?}|{alpha_points}|{grid:?}|{search_radius:?}|{:?}",
        values.iter().map(|v| v.to_bits()).fold(0u64, |h, b| h.rotate_left(5) ^ b)
    ));
    Ok(LegendreTable {
        x_grid: x_grid.to_vec(),
        alpha_axes,
        values,
        params: *params,
        z_points: grid.points,
        search_radius,
        fingerprint,
    })
}

fn star_column(
    lambda: &dyn DriverEval,
    x1: f64,
    dim: usize,
    params: &TruncationParams,
    alphas: &[Vec<f64>],
    grid: &StarGrid,
) -> Result<(Vec<f64>, f64)> {
    let x = [x1];
    let mut radius = grid.radius;
    for doubling in 0..=MAX_DOUBLINGS {
        let cloud = ZCloud::build(|z| tilde_lambda(lambda, params, &x, z), dim, &grid.axis(radius))?;
        let mut col = Vec::with_capacity(alphas.len());
        let mut coarse = None;
        for a in alphas {
            if norm(a) > params.alpha_radius() * (1.0 + 1e-12) {
                col.push(NEG_INF);
                continue;
            }
            match cloud.star(a) {
                Some(v) => col.push(v),
                None => {
                    coarse = Some(a.clone());
                    break;
                }
            }
        }
        match coarse {
            None => return Ok((col, radius)),
            Some(a) if doubling == MAX_DOUBLINGS => {
                return Err(Error::SearchTooCoarse { alpha: a, doublings: MAX_DOUBLINGS })
            }
            Some(_) => {
                log::warn!("conjugate search at x1 = {x1} hit the rim at radius {radius}; doubling");
                radius *= 2.0;
            }
        }
    }
    unreachable!("loop returns on its last pass")
}

impl LegendreTable {
    pub fn active_dim(&self) -> usize {
        self.alpha_axes.len()
    }

    pub fn n_alpha(&self) -> usize {
        self.alpha_axes.iter().map(|a| a.len()).product()
    }

    pub fn alpha_point(&self, i: usize) -> Vec<f64> {
        z_point(&self.alpha_axes, i)
    }

    pub fn index(&self, ix: usize, ia: usize) -> usize {
        ix * self.n_alpha() + ia
    }

    /// Multilinear interpolation in `(x1, alpha)`. Corners holding `NEG_INF`
    /// are dropped and the remaining weights renormalized, so points inside
    /// the ball near its rim stay finite. `NEG_INF` outside the ball.
    pub fn eval(&self, x1: f64, alpha: &[f64]) -> Result<f64> {
        if alpha.len() != self.active_dim() {
            return Err(config("alpha dimension does not match the table"));
        }
        if norm(alpha) > self.params.alpha_radius() * (1.0 + 1e-12) {
            return Ok(NEG_INF);
        }
        let out = |what: &str, v: f64| Error::OutOfRange(format!("{what} = {v} outside the table"));
        let (ix, wx) = locate(&self.x_grid, x1).ok_or_else(|| out("x1", x1))?;
        let mut cells = [(0usize, 0.0f64); MAX_ACTIVE];
        for (d, ad) in alpha.iter().enumerate() {
            cells[d] = locate(&self.alpha_axes[d], *ad).ok_or_else(|| out("alpha", *ad))?;
        }
        let d = alpha.len();
        let (mut acc, mut wsum) = (0.0, 0.0);
        for corner in 0..(1usize << (d + 1)) {
            let bx = corner & 1;
            let mut w = if bx == 1 { wx } else { 1.0 - wx };
            let mut ia = 0;
            for (k, &(i, t)) in cells[..d].iter().enumerate() {
                let bit = (corner >> (k + 1)) & 1;
                w *= if bit == 1 { t } else { 1.0 - t };
                ia = ia * self.alpha_axes[k].len() + i + bit;
            }
            if w == 0.0 {
                continue;
            }
            let v = self.values[self.index(ix + bx, ia)];
            if v.is_finite() {
                acc += w * v;
                wsum += w;
            }
        }
        Ok(if wsum > 0.0 { acc / wsum } else { NEG_INF })
    }

    /// The column of `alpha` values at `x1`, linear in `x` between nodes.
    pub fn column(&self, x1: f64) -> Result<Vec<f64>> {
        let (ix, wx) = locate(&self.x_grid, x1)
            .ok_or_else(|| Error::OutOfRange(format!("x1 = {x1} outside the table")))?;
        let na = self.n_alpha();
        Ok((0..na)
            .map(|ia| {
                let a = self.values[self.index(ix, ia)];
                if wx == 0.0 {
                    return a;
                }
                let b = self.values[self.index(ix + 1, ia)];
                (1.0 - wx) * a + wx * b
            })
            .collect())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let ferr = |e: &dyn std::fmt::Display| Error::Format(e.to_string());
        let meta = TableMeta {
            params: self.params,
            z_points: self.z_points,
            search_radius: self.search_radius.clone(),
            fingerprint: self.fingerprint.clone(),
        };
        let meta = serde_json::to_string(&meta).map_err(|e| ferr(&e))?;
        let axes = serde_json::to_string(&self.alpha_axes).map_err(|e| ferr(&e))?;
        writeln!(out, "# {meta}").map_err(|e| ferr(&e))?;
        writeln!(out, "# {axes}").map_err(|e| ferr(&e))?;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["x1".to_string()];
        header.extend((1..=self.active_dim()).map(|d| format!("alpha{d}")));
        header.push("value".into());
        w.write_record(&header).map_err(crate::dynamics::fmt_err)?;
        for (ix, x) in self.x_grid.iter().enumerate() {
            for ia in 0..self.n_alpha() {
                let mut row = vec![x.to_string()];
                row.extend(self.alpha_point(ia).iter().map(|v| v.to_string()));
                row.push(self.values[self.index(ix, ia)].to_string());
                w.write_record(&row).map_err(crate::dynamics::fmt_err)?;
            }
        }
        w.flush().map_err(|e| ferr(&e))
    }

    pub fn read_csv<R: BufRead>(mut input: R) -> Result<Self> {
        let ferr = |e: &dyn std::fmt::Display| Error::Format(e.to_string());
        let header = |input: &mut R| -> Result<String> {
            let mut line = String::new();
            input.read_line(&mut line).map_err(|e| ferr(&e))?;
            line.trim_end()
                .strip_prefix("# ")
                .map(str::to_string)
                .ok_or_else(|| Error::Format("missing table header comment".into()))
        };
        let meta: TableMeta = serde_json::from_str(&header(&mut input)?).map_err(|e| ferr(&e))?;
        let alpha_axes: Vec<Vec<f64>> =
            serde_json::from_str(&header(&mut input)?).map_err(|e| ferr(&e))?;
        let d = alpha_axes.len();
        if d == 0 || d > MAX_ACTIVE {
            return Err(Error::Format(format!("table needs 1..={MAX_ACTIVE} alpha axes")));
        }
        let mut rdr = csv::Reader::from_reader(input);
        let mut x_grid: Vec<f64> = Vec::new();
        let mut values = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| ferr(&e))?;
            let nums: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| ferr(&e)))
                .collect::<Result<_>>()?;
            if nums.len() != d + 2 {
                return Err(Error::Format("wrong number of columns".into()));
            }
            if x_grid.last() != Some(&nums[0]) {
                x_grid.push(nums[0]);
            }
            values.push(nums[d + 1]);
        }
        let t = LegendreTable {
            x_grid,
            alpha_axes,
            values,
            params: meta.params,
            z_points: meta.z_points,
            search_radius: meta.search_radius,
            fingerprint: meta.fingerprint,
        };
        if t.values.len() != t.x_grid.len() * t.n_alpha() || t.search_radius.len() != t.x_grid.len() {
            return Err(Error::Format("row count does not match the grid".into()));
        }
        Ok(t)
    }
}

#[derive(Serialize, Deserialize)]
struct TableMeta {
    params: TruncationParams,
    z_points: usize,
    search_radius: Vec<f64>,
    fingerprint: String,
}

/// `inf_{|alpha| <= M+1} { -z alpha - lambda~*(x1, alpha) }` over the table's
/// `alpha` lattice.
pub fn fenchel_recover(table: &LegendreTable, x1: f64, z: &[f64]) -> Result<f64> {
    if z.len() != table.active_dim() {
        return Err(config("z dimension does not match the table"));
    }
    let col = table.column(x1)?;
    Ok(recover_from_column(table, &col, z))
}

fn recover_from_column(table: &LegendreTable, col: &[f64], z: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    let mut a = vec![0.0; z.len()];
    for (ia, v) in col.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        let mut rem = ia;
        for d in (0..z.len()).rev() {
            let n = table.alpha_axes[d].len();
            a[d] = table.alpha_axes[d][rem % n];
            rem /= n;
        }
        best = best.min(-dot(z, &a) - v);
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTripReport {
    /// Largest `|recovered - lambda~|` over the lattice.
    pub worst_gap: f64,
    /// Largest gap beyond `abs_tol + 3 stderr` (0 when none).
    pub worst_excess: f64,
    pub x1_at_worst: f64,
    pub z_at_worst: Vec<f64>,
    pub points: usize,
}

impl RoundTripReport {
    pub fn passed(&self) -> bool {
        self.worst_excess == 0.0
    }
}

/// Compares `fenchel_recover` with `lambda~` on each node's search lattice.
/// `stderr` supplies the Monte Carlo error of `lambda` at `(x, z)`.
pub fn fenchel_round_trip(
    lambda: &dyn DriverEval,
    stderr: &dyn DriverEval,
    table: &LegendreTable,
    abs_tol: f64,
) -> Result<RoundTripReport> {
    let grid_of = |r: f64| StarGrid { radius: r, points: table.z_points };
    let dim = table.active_dim();
    let per_node: Vec<(f64, f64, Vec<f64>, usize)> = table
        .x_grid
        .par_iter()
        .zip(&table.search_radius)
        .map(|(&x1, &r)| {
            let x = [x1];
            let cloud = ZCloud::build(|z| tilde_lambda(lambda, &table.params, &x, z), dim, &grid_of(r).axis(r))?;
            let col = table.column(x1)?;
            let (mut gap, mut excess, mut at) = (0.0f64, 0.0f64, vec![0.0; dim]);
            for i in 0..cloud.len() {
                let z = cloud.point(i);
                let g = (recover_from_column(table, &col, z) - cloud.vals[i]).abs();
                let se = if norm(z) < table.params.cone_radius() { stderr.eval(&x, z)? } else { 0.0 };
                let e = g - abs_tol - 3.0 * se;
                if g > gap {
                    gap = g;
                }
                if e > excess {
                    excess = e;
                    at = z.to_vec();
                }
            }
            Ok((gap, excess, at, cloud.len()))
        })
        .collect::<Result<_>>()?;
    let mut rep = RoundTripReport {
        worst_gap: 0.0,
        worst_excess: 0.0,
        x1_at_worst: table.x_grid[0],
        z_at_worst: vec![0.0; dim],
        points: 0,
    };
    for (x1, (gap, excess, at, n)) in table.x_grid.iter().zip(per_node) {
        rep.points += n;
        rep.worst_gap = rep.worst_gap.max(gap);
        if excess > rep.worst_excess {
            rep.worst_excess = excess;
            rep.x1_at_worst = *x1;
            rep.z_at_worst = at;
        }
    }
    Ok(rep)
}

/// Finite exactly on the ball, concave along `alpha` lines, Lipschitz in
/// `x` with constant `lip_tilde` up to 5%.
pub fn legendre_property_audit(table: &LegendreTable, lip_tilde: f64) -> AuditReport {
    let na = table.n_alpha();
    let ra = table.params.alpha_radius();
    let alphas: Vec<Vec<f64>> = (0..na).map(|i| table.alpha_point(i)).collect();
    let mut domain = Tally::new();
    let mut conc = Tally::new();
    let mut lx = Tally::new();
    for ix in 0..table.x_grid.len() {
        for (ia, a) in alphas.iter().enumerate() {
            let k = table.index(ix, ia);
            let inside = norm(a) <= ra * (1.0 + 1e-12);
            if inside != table.values[k].is_finite() {
                domain.record(1.0, &[k]);
            }
            if ix + 1 < table.x_grid.len() && inside {
                let j = table.index(ix + 1, ia);
                let dx = table.x_grid[ix + 1] - table.x_grid[ix];
                let excess = (table.values[k] - table.values[j]).abs() - 1.05 * lip_tilde * dx;
                lx.record(excess, &[k, j]);
            }
        }
        for (d, axis) in table.alpha_axes.iter().enumerate() {
            let stride: usize = table.alpha_axes[d + 1..].iter().map(|a| a.len()).product();
            for ia in 0..na {
                let pos = (ia / stride) % axis.len();
                if pos == 0 || pos + 1 == axis.len() {
                    continue;
                }
                let (a, b, c) = (
                    table.index(ix, ia - stride),
                    table.index(ix, ia),
                    table.index(ix, ia + stride),
                );
                let (va, vb, vc) = (table.values[a], table.values[b], table.values[c]);
                if !(va.is_finite() && vb.is_finite() && vc.is_finite()) {
                    continue;
                }
                let (p, q, r) = (axis[pos - 1], axis[pos], axis[pos + 1]);
                let w = (r - q) / (r - p);
                let chord = w * va + (1.0 - w) * vc;
                conc.record(chord - vb - 1e-9 * (1.0 + vb.abs()), &[b]);
            }
        }
    }
    AuditReport {
        properties: vec![
            domain.finish("finite_domain"),
            conc.finish("concavity_alpha"),
            lx.finish("lipschitz_x"),
        ],
    }
}
