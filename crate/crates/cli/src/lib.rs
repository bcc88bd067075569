//! Experiment harness for the hardmax-transformer constructions: exactness
//! verification of the weight builders, approximation- and classification-
//! rate experiments, and parameter audits, with CSV/JSON reporting.

pub mod config;
pub mod rates;
pub mod report;
pub mod verify;

pub use config::Config;
pub use report::{ExitStatus, RatePoint, RateResult};

/// Ordinary least squares slope of y against x.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Slope of log(y) against log(x).
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.max(1e-300).ln()).collect();
    ols_slope(&lx, &ly)
}
