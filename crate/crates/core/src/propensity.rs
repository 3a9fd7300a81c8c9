//! Popularity-based exposure propensities.
//!
//! `theta_click(i) = (n_i / max n)^power` and
//! `theta_nonclick(i) = (1 - n_i / max n)^power`, where `n_i` counts training
//! clicks on item `i`. A value that would be exactly zero is replaced by a
//! floor because every consumer divides by it.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::ImplicitDataset;
use crate::{Error, Result};

pub const DEFAULT_POWER: f64 = 0.5;
pub const DEFAULT_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropensityConfig {
    pub power: f64,
    pub floor: f64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self {
            power: DEFAULT_POWER,
            floor: DEFAULT_FLOOR,
        }
    }
}

impl PropensityConfig {
    fn validate(&self) -> Result<()> {
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(Error::domain(format!("propensity power {} must be > 0", self.power)));
        }
        if !(self.floor > 0.0 && self.floor <= 1.0) {
            return Err(Error::domain(format!("propensity floor {} outside (0, 1]", self.floor)));
        }
        Ok(())
    }
}

fn max_count(counts: &[u64]) -> Result<u64> {
    match counts.iter().copied().max() {
        Some(m) if m > 0 => Ok(m),
        _ => Err(Error::Estimation("no item has a positive click count".into())),
    }
}

pub fn estimate_click_propensity(counts: &[u64], cfg: PropensityConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let max = max_count(counts)? as f64;
    Ok(counts
        .iter()
        .map(|&n| {
            if n == 0 {
                cfg.floor
            } else {
                (n as f64 / max).powf(cfg.power)
            }
        })
        .collect())
}

pub fn estimate_nonclick_propensity(counts: &[u64], cfg: PropensityConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let max_n = max_count(counts)?;
    let max = max_n as f64;
    Ok(counts
        .iter()
        .map(|&n| {
            if n == max_n {
                cfg.floor
            } else {
                (1.0 - n as f64 / max).powf(cfg.power)
            }
        })
        .collect())
}

/// `P(o = 1 | c = 0) = theta (1 - gamma) / (1 - theta gamma)`.
pub fn posterior_exposure(theta: f64, gamma: f64) -> Result<f64> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::domain(format!("theta {theta} outside (0, 1]")));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::domain(format!("gamma {gamma} outside [0, 1]")));
    }
    let denom = 1.0 - theta * gamma;
    if denom <= 0.0 {
        return Err(Error::Singularity(format!(
            "theta * gamma = {} leaves no non-click mass",
            theta * gamma
        )));
    }
    Ok(theta * (1.0 - gamma) / denom)
}

/// Per-item propensities estimated from one training split.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityTable {
    pub theta_click: Vec<f64>,
    pub theta_nonclick: Vec<f64>,
    pub power: f64,
    pub floor: f64,
    pub max_count: u64,
}

impl PropensityTable {
    pub fn from_counts(counts: &[u64], cfg: PropensityConfig) -> Result<Self> {
        Ok(Self {
            theta_click: estimate_click_propensity(counts, cfg)?,
            theta_nonclick: estimate_nonclick_propensity(counts, cfg)?,
            power: cfg.power,
            floor: cfg.floor,
            max_count: max_count(counts)?,
        })
    }

    pub fn from_dataset(train: &ImplicitDataset, cfg: PropensityConfig) -> Result<Self> {
        Self::from_counts(&train.item_click_counts(), cfg)
    }

    /// Table with every propensity fixed to `theta`, e.g. for fully observed worlds.
    pub fn uniform(num_items: usize, theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::domain(format!("theta {theta} outside (0, 1]")));
        }
        Ok(Self {
            theta_click: vec![theta; num_items],
            theta_nonclick: vec![theta; num_items],
            power: DEFAULT_POWER,
            floor: DEFAULT_FLOOR,
            max_count: 0,
        })
    }

    pub fn num_items(&self) -> usize {
        self.theta_click.len()
    }

    /// Two-column `item<TAB>value` text.
    pub fn click_table_text(&self) -> String {
        two_column(&self.theta_click)
    }

    pub fn nonclick_table_text(&self) -> String {
        two_column(&self.theta_nonclick)
    }

    pub fn write_tables(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            ("propensity_click.tsv", self.click_table_text()),
            ("propensity_nonclick.tsv", self.nonclick_table_text()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn two_column(values: &[f64]) -> String {
    let mut out = String::new();
    for (i, v) in values.iter().enumerate() {
        let _ = writeln!(out, "{i}\t{v:?}");
    }
    out
}
