//! JSON experiment configuration shared by all subcommands.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Name of the composition model from the builtin catalog.
    pub model: String,
    /// Head counts for the approximation-rate experiment.
    pub h_grid: Vec<usize>,
    /// Sample sizes for the classification-rate experiment.
    pub n_grid: Vec<usize>,
    /// Seeds replicated per grid point (classification rate).
    pub seeds: Vec<u64>,
    /// Monte-Carlo draws per excess-risk estimate.
    pub n_mc: usize,
    /// Randomized cases per construction in the verification suite.
    pub n_verify: usize,
    /// Test-grid points per dimension for sup-error measurement
    /// (0 = choose by dimension: 201 univariate, 41 bivariate).
    pub test_grid: usize,
    /// Truncation level of the plug-in classifier.
    pub beta: f64,
    /// Coding copies for compiled networks (0 = number of blocks).
    pub copies: usize,
    /// Head count for the audit subcommand.
    pub audit_h: usize,
    /// Deliberately undersized margin constants in the verification suite
    /// (demonstrates that violated preconditions are detected).
    pub sabotage_b_margin: bool,
    /// Deliberately densified weights in the audit (must fail).
    pub densify: bool,
    /// Second model for the dimension-robustness comparison
    /// (empty = skip).
    pub robustness_model: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: "smooth-1d".into(),
            h_grid: vec![16, 64, 256],
            n_grid: (7..=13).map(|e| 1usize << e).collect(),
            seeds: (0..10).collect(),
            n_mc: 8000,
            n_verify: 1000,
            test_grid: 0,
            beta: 1.0,
            copies: 0,
            audit_h: 4,
            sabotage_b_margin: false,
            densify: false,
            robustness_model: String::new(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Config = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, grid) in [("h_grid", &self.h_grid), ("n_grid", &self.n_grid)] {
            if grid.is_empty() {
                bail!("{name} must be non-empty");
            }
            if grid.windows(2).any(|w| w[0] >= w[1]) {
                bail!("{name} must be strictly increasing: {grid:?}");
            }
        }
        if self.seeds.is_empty() {
            bail!("seeds must be non-empty");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            bail!("seeds must be distinct: {:?}", self.seeds);
        }
        if self.n_mc == 0 || self.n_verify == 0 {
            bail!("n_mc and n_verify must be positive");
        }
        if !(self.beta > 0.0) {
            bail!("beta must be positive");
        }
        Ok(())
    }
}
