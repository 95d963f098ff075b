//! Acceptance-cost performance model.
//!
//! Throughput is `TPS = τ / (T_overhead + T_verify + T_backbone + T_head)`.
//! Comparing a head design `M` against the full-vocabulary head with
//! `ρ_τ = τ_M / τ_Full`, `ν = T_head^M / T_head^Full` and
//! `κ = T_head^Full / T_non-head` gives the end-to-end speedup
//!
//! ```text
//! ρ_TPS(ν, ρ_τ; κ) = ρ_τ · (1 + κ) / (1 + ν·κ)
//! ```
//!
//! and `M` beats the baseline iff `ρ_τ > (1 + ν·κ) / (1 + κ)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Slack allowed on `ν ≤ 1` before a head counts as slower than full.
pub const NU_SLACK: f64 = 1e-9;

/// Bundled reference rows: acceptance-cost results for published draft-head
/// designs (Llama-3.1-8B, temperature 0, batch 1).
pub const REFERENCE_TABLE_CSV: &str = include_str!("../data/reference_speedups.csv");

/// κ used with the bundled reference table.
pub const REFERENCE_KAPPA: f64 = 0.25;

/// Crosscheck tolerance on |predicted − measured| speedup.
pub const CROSSCHECK_TOLERANCE: f64 = 0.05;

/// Wall-clock decomposition of one speculative step, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingBreakdown {
    pub t_overhead: f64,
    pub t_verify: f64,
    pub t_backbone: f64,
    pub t_head: f64,
}

impl TimingBreakdown {
    pub fn new(t_overhead: f64, t_verify: f64, t_backbone: f64, t_head: f64) -> Result<Self> {
        let t = Self {
            t_overhead,
            t_verify,
            t_backbone,
            t_head,
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        for (name, x) in [
            ("t_overhead", self.t_overhead),
            ("t_verify", self.t_verify),
            ("t_backbone", self.t_backbone),
            ("t_head", self.t_head),
        ] {
            if !(x.is_finite() && x >= 0.0) {
                return Err(LabError::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {x}"
                )));
            }
        }
        Ok(())
    }

    pub fn t_draft(&self) -> f64 {
        self.t_backbone + self.t_head
    }

    pub fn t_non_head(&self) -> f64 {
        self.t_overhead + self.t_verify + self.t_backbone
    }

    pub fn total(&self) -> f64 {
        self.t_overhead + self.t_verify + self.t_draft()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            t_overhead: self.t_overhead * k,
            t_verify: self.t_verify * k,
            t_backbone: self.t_backbone * k,
            t_head: self.t_head * k,
        }
    }
}

/// A head design placed in the (ν, ρ_τ) plane under a deployment κ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfPoint {
    pub nu: f64,
    pub rho_tau: f64,
    pub kappa: f64,
}

impl PerfPoint {
    pub fn new(nu: f64, rho_tau: f64, kappa: f64) -> Result<Self> {
        check_nu(nu)?;
        check_kappa(kappa)?;
        if !(rho_tau.is_finite() && rho_tau > 0.0) {
            return Err(LabError::InvalidArgument(format!("rho_tau must be > 0, got {rho_tau}")));
        }
        Ok(Self { nu, rho_tau, kappa })
    }

    pub fn speedup(&self) -> f64 {
        self.rho_tau * (1.0 + self.kappa) / (1.0 + self.nu * self.kappa)
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if !(nu.is_finite() && nu > 0.0) {
        return Err(LabError::InvalidArgument(format!("nu must be in (0, 1], got {nu}")));
    }
    if nu > 1.0 + NU_SLACK {
        return Err(LabError::InvalidArgument(format!(
            "nu = {nu} > 1: head is slower than the full-vocabulary baseline"
        )));
    }
    Ok(())
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa.is_finite() && kappa >= 0.0) {
        return Err(LabError::InvalidArgument(format!("kappa must be >= 0, got {kappa}")));
    }
    Ok(())
}

/// Tokens per second.
pub fn tps(tau: f64, timing: &TimingBreakdown) -> Result<f64> {
    timing.validate()?;
    if !(tau >= 1.0) {
        return Err(LabError::InvalidArgument(format!("tau must be >= 1, got {tau}")));
    }
    let total = timing.total();
    if total <= 0.0 {
        return Err(LabError::DivisionByZero("total step time is zero"));
    }
    Ok(tau / total)
}

/// Head share of the pipeline, measured on the full-vocabulary setup.
pub fn kappa(timing_full: &TimingBreakdown) -> Result<f64> {
    timing_full.validate()?;
    let non_head = timing_full.t_non_head();
    if non_head <= 0.0 {
        return Err(LabError::DivisionByZero("non-head time is zero"));
    }
    Ok(timing_full.t_head / non_head)
}

/// End-to-end speedup relative to the full-vocabulary head.
pub fn speedup(nu: f64, rho_tau: f64, kappa: f64) -> Result<f64> {
    Ok(PerfPoint::new(nu, rho_tau, kappa)?.speedup())
}

/// Smallest `ρ_τ` that still breaks even.
pub fn min_acceptance_ratio(nu: f64, kappa: f64) -> Result<f64> {
    check_nu(nu)?;
    check_kappa(kappa)?;
    Ok((1.0 + nu * kappa) / (1.0 + kappa))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelPoint {
    pub level: f64,
    pub nu: f64,
    pub rho_tau: f64,
}

/// Points on the speedup level curves: for each level and ν, the ρ_τ that
/// achieves exactly that speedup.
pub fn level_curve_grid(kappa: f64, speedup_levels: &[f64], nu_grid: &[f64]) -> Result<Vec<LevelPoint>> {
    check_kappa(kappa)?;
    if speedup_levels.is_empty() || nu_grid.is_empty() {
        return Err(LabError::InvalidArgument("level and nu grids must be non-empty".into()));
    }
    let mut out = Vec::with_capacity(speedup_levels.len() * nu_grid.len());
    for &level in speedup_levels {
        if !(level.is_finite() && level > 0.0) {
            return Err(LabError::InvalidArgument(format!(
                "speedup level must be > 0, got {level}"
            )));
        }
        for &nu in nu_grid {
            check_nu(nu)?;
            out.push(LevelPoint {
                level,
                nu,
                rho_tau: level * (1.0 + nu * kappa) / (1.0 + kappa),
            });
        }
    }
    Ok(out)
}

/// `count` evenly spaced ν values in `(0, 1]`, ending at 1.
pub fn nu_grid(count: usize) -> Vec<f64> {
    (1..=count).map(|i| i as f64 / count as f64).collect()
}

/// One published acceptance-cost measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub method: String,
    pub config: String,
    pub measured_speedup: f64,
    pub rho_tau: f64,
    pub nu: f64,
}

pub fn parse_reference_rows(text: &str) -> Result<Vec<ReferenceRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<ReferenceRow>, _>>()
        .map_err(|e| LabError::InvalidArgument(format!("reference table: {e}")))?;
    if rows.is_empty() {
        return Err(LabError::InvalidArgument("reference table has no rows".into()));
    }
    Ok(rows)
}

pub fn bundled_reference_rows() -> Vec<ReferenceRow> {
    parse_reference_rows(REFERENCE_TABLE_CSV).expect("bundled reference table parses")
}

pub fn load_reference_rows(path: &Path) -> Result<Vec<ReferenceRow>> {
    parse_reference_rows(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscheckRow {
    pub method: String,
    pub config: String,
    pub nu: f64,
    pub rho_tau: f64,
    pub kappa: f64,
    pub predicted_speedup: f64,
    pub measured_speedup: f64,
    pub delta: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscheckReport {
    pub kappa: f64,
    pub tolerance: f64,
    pub rows: Vec<CrosscheckRow>,
    pub all_pass: bool,
}

/// Compares the speedup model against measured speedups row by row.
pub fn crosscheck(rows: &[ReferenceRow], kappa: f64, tolerance: f64) -> Result<CrosscheckReport> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let predicted = speedup(row.nu, row.rho_tau, kappa)?;
        let delta = (predicted - row.measured_speedup).abs();
        out.push(CrosscheckRow {
            method: row.method.clone(),
            config: row.config.clone(),
            nu: row.nu,
            rho_tau: row.rho_tau,
            kappa,
            predicted_speedup: predicted,
            measured_speedup: row.measured_speedup,
            delta,
            pass: delta <= tolerance,
        });
    }
    let all_pass = out.iter().all(|r| r.pass);
    Ok(CrosscheckReport {
        kappa,
        tolerance,
        rows: out,
        all_pass,
    })
}

pub fn crosscheck_reference(rows: &[ReferenceRow]) -> Result<CrosscheckReport> {
    crosscheck(rows, REFERENCE_KAPPA, CROSSCHECK_TOLERANCE)
}
