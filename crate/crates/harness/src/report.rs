//! Sweep tables, pass/fail checks and their files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use twoscale_core::bsde::ValueEstimate;
use twoscale_core::stats::LineFit;

/// One estimate in a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub epsilon: Option<f64>,
    pub eta: Option<f64>,
    pub estimator: String,
    pub value: f64,
    pub stderr: f64,
    pub runtime_s: f64,
    pub fingerprint: String,
}

impl Row {
    pub fn new(
        epsilon: Option<f64>,
        eta: Option<f64>,
        estimator: impl Into<String>,
        est: &ValueEstimate,
        runtime_s: f64,
    ) -> Self {
        Self {
            epsilon,
            eta,
            estimator: estimator.into(),
            value: est.mean,
            stderr: est.stderr,
            runtime_s,
            fingerprint: est.fingerprint.clone(),
        }
    }
}

/// A fitted log-log slope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slope {
    pub label: String,
    pub slope: f64,
    pub stderr: f64,
    /// 95% interval.
    pub ci: (f64, f64),
}

impl Slope {
    pub fn from_fit(label: impl Into<String>, fit: &LineFit) -> Self {
        Self { label: label.into(), slope: fit.slope, stderr: fit.slope_stderr, ci: fit.slope_ci() }
    }
}

/// A tolerance check: `observed <= limit` unless stated otherwise in
/// `detail`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub observed: f64,
    pub limit: f64,
    pub detail: String,
}

impl Check {
    pub fn at_most(name: impl Into<String>, observed: f64, limit: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed: observed <= limit, observed, limit, detail: detail.into() }
    }

    pub fn at_least(name: impl Into<String>, observed: f64, limit: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed: observed >= limit, observed, limit, detail: detail.into() }
    }

    pub fn flag(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        let v = if passed { 1.0 } else { 0.0 };
        Self { name: name.into(), passed, observed: v, limit: 1.0, detail: detail.into() }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {}: observed {} limit {}{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            short(self.observed),
            short(self.limit),
            if self.detail.is_empty() { String::new() } else { format!(" ({})", self.detail) }
        )
    }
}

/// Six decimals, or scientific notation for small nonzero magnitudes.
fn short(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.3e}")
    } else {
        format!("{v:.6}")
    }
}

/// `(x, y, y_err)` series for one figure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plot {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<(f64, f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub name: String,
    pub rows: Vec<Row>,
    pub slopes: Vec<Slope>,
    pub checks: Vec<Check>,
    pub plots: Vec<Plot>,
}

impl SweepResult {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), ..Default::default() }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn row(&self, estimator: &str, epsilon: Option<f64>, eta: Option<f64>) -> Option<&Row> {
        self.rows.iter().find(|r| r.estimator == estimator && r.epsilon == epsilon && r.eta == eta)
    }

    pub fn merge(&mut self, other: SweepResult) {
        self.rows.extend(other.rows);
        self.slopes.extend(other.slopes);
        self.checks.extend(other.checks);
        self.plots.extend(other.plots);
    }

    /// CSV with columns `epsilon, eta, estimator, value, stderr, runtime_s,
    /// fingerprint`; `timings = false` writes 0 runtimes so that reruns
    /// produce identical bytes.
    pub fn write_csv<W: Write>(&self, out: W, timings: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epsilon", "eta", "estimator", "value", "stderr", "runtime_s", "fingerprint"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let rt = if timings { format!("{:.3}", r.runtime_s) } else { "0".into() };
            w.write_record([
                opt(r.epsilon),
                opt(r.eta),
                r.estimator.clone(),
                r.value.to_string(),
                r.stderr.to_string(),
                rt,
                r.fingerprint.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<name>.csv`, one `<name>_<plot>.dat` per plot and
    /// `<name>_checks.json`; returns the paths.
    pub fn write_to(&self, dir: &Path, timings: bool) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut paths = Vec::new();
        let csv_path = dir.join(format!("{}.csv", self.name));
        self.write_csv(fs::File::create(&csv_path)?, timings)?;
        paths.push(csv_path);
        for p in &self.plots {
            let path = dir.join(format!("{}_{}.dat", self.name, p.name));
            let mut f = fs::File::create(&path)?;
            writeln!(f, "# {} {} {}_err", p.x_label, p.y_label, p.y_label)?;
            for (x, y, e) in &p.points {
                writeln!(f, "{x} {y} {e}")?;
            }
            paths.push(path);
        }
        let checks_path = dir.join(format!("{}_checks.json", self.name));
        let summary = serde_json::json!({ "checks": self.checks, "slopes": self.slopes });
        fs::write(&checks_path, serde_json::to_string_pretty(&summary)?)?;
        paths.push(checks_path);
        Ok(paths)
    }

    pub fn print_checks(&self) {
        for c in &self.checks {
            println!("{}", c.line());
        }
        for s in &self.slopes {
            println!("slope {}: {:.4} ± {:.4} (95% [{:.4}, {:.4}])", s.label, s.slope, s.stderr, s.ci.0, s.ci.1);
        }
    }
}
