//! Run configuration: a sectioned `key = value` document.
//!
//! ```toml
//! [model]
//! lambda = 0.4167
//!
//! [grid]
//! n_q = 100
//! ```
//!
//! Omitted keys take their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bounds::{BoundsOptions, Resolution};
use crate::error::{Error, Result};
use crate::hjb::PicardOptions;
use crate::market::{DerivativeRule, ModelParams};

/// Benchmark and evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Initial inventory, MWh.
    pub q0: f64,
    /// Monte Carlo paths per day.
    pub paths: usize,
    /// Synthetic days when no data directory is given.
    pub days: usize,
    pub twap: bool,
    pub perfect_foresight: bool,
    /// Inventory intervals of the perfect-foresight grid.
    pub pf_n_q: usize,
    /// Replace `beta` by the day's maximum absolute forecast price.
    pub day_beta: bool,
    /// Moving-average window of the price forecast, in 15-minute steps.
    pub n_w: usize,
    pub derivative_rule: DerivativeRule,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            q0: 0.0,
            paths: 100,
            days: 10,
            twap: true,
            perfect_foresight: true,
            pf_n_q: 1000,
            day_beta: true,
            n_w: 4,
            derivative_rule: DerivativeRule::Interval,
        }
    }
}

/// Seeds and output switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub output_dir: String,
    /// Write the value stack after `solve`.
    pub snapshot: bool,
    /// Write per-step solver diagnostics.
    pub diagnostics: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 7, output_dir: "out".into(), snapshot: true, diagnostics: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelParams,
    pub grid: Resolution,
    pub bounds: BoundsOptions,
    pub picard: PicardOptions,
    pub benchmark: BenchmarkConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.picard.validate()?;
        let b = &self.benchmark;
        if b.paths == 0 {
            return Err(Error::invalid("benchmark.paths", "must be >= 1"));
        }
        if b.n_w == 0 {
            return Err(Error::invalid("benchmark.n_w", "must be >= 1"));
        }
        if b.pf_n_q < 3 {
            return Err(Error::invalid("benchmark.pf_n_q", "must be >= 3"));
        }
        if !(self.bounds.eps_tail > 0.0 && self.bounds.eps_tail < 1.0) {
            return Err(Error::invalid("bounds.eps_tail", "must lie in (0, 1)"));
        }
        if self.bounds.mc_paths == 0 || self.bounds.mc_steps == 0 {
            return Err(Error::invalid("bounds.mc_paths", "Monte Carlo sizes must be >= 1"));
        }
        Ok(())
    }
}
