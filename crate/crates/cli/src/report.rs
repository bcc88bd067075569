//! Result types and CSV/JSON serialization helpers.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// Process exit discipline: 0 all-pass, 1 check failures, 2 bad config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Pass,
    CheckFailed,
    ConfigError,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Pass => 0,
            ExitStatus::CheckFailed => 1,
            ExitStatus::ConfigError => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RatePoint {
    /// Grid coordinate (head count h or sample size n).
    pub x: f64,
    /// Measured error (sup error or median excess risk).
    pub error: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateResult {
    pub points: Vec<RatePoint>,
    /// OLS slope of log error against log x.
    pub slope: f64,
    /// Theoretical exponent (-p/K or -p/(2p+K)).
    pub target: f64,
    pub pass: bool,
}

/// Writes grid points as CSV with the given column names; output is a pure
/// function of the points, so fixed seeds give byte-identical files.
pub fn write_rate_csv(path: &Path, x_name: &str, points: &[RatePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record([x_name, "error", "stderr"])?;
    for p in points {
        w.write_record([
            format!("{}", p.x),
            format!("{:.12e}", p.error),
            format!("{:.12e}", p.stderr),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Recomputes the log-log slope from a rate CSV (independent readback path
/// used to cross-check reported slopes).
pub fn slope_from_csv(path: &Path) -> Result<f64> {
    let mut r = csv::Reader::from_path(path)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        xs.push(rec[0].parse::<f64>()?);
        ys.push(rec[1].parse::<f64>()?);
    }
    Ok(crate::log_log_slope(&xs, &ys))
}
