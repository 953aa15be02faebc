use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::logistic;
use crate::error::{LsrError, Result};
use crate::seed;

/// Bin edges over classifier-probability space. Bin `i` covers
/// `[edges[i], edges[i + 1])`, the last bin also includes 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinScheme {
    pub edges: Vec<f64>,
}

impl Default for BinScheme {
    fn default() -> Self {
        BinScheme {
            edges: vec![0.0, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0],
        }
    }
}

impl BinScheme {
    pub fn validate(&self) -> Result<()> {
        if self.edges.len() < 2 {
            return Err(LsrError::config("bins.edges", "need at least two edges"));
        }
        if self.edges[0] != 0.0 || *self.edges.last().unwrap() != 1.0 {
            return Err(LsrError::config("bins.edges", "must start at 0 and end at 1"));
        }
        if self.edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LsrError::config("bins.edges", "must be strictly increasing"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self, bin: usize) -> (f64, f64) {
        (self.edges[bin], self.edges[bin + 1])
    }

    pub fn bin_of(&self, q: f64) -> usize {
        let q = q.clamp(0.0, 1.0);
        let last = self.len() - 1;
        (0..last).find(|&i| q < self.edges[i + 1]).unwrap_or(last)
    }
}

/// Surrogate patch classifier: `q = logistic(slope * fraction + offset + noise)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelerConfig {
    pub slope: f64,
    pub offset: f64,
    pub noise_std: f64,
    /// Score each quadrant separately and keep the maximum probability.
    pub max_of_quadrants: bool,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        LabelerConfig {
            slope: 7.0,
            offset: -3.0,
            noise_std: 0.5,
            max_of_quadrants: false,
        }
    }
}

impl LabelerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.slope.is_finite() || !self.offset.is_finite() {
            return Err(LsrError::config("labeler.slope", "must be finite"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(LsrError::config("labeler.noise_std", "must be non-negative"));
        }
        Ok(())
    }

    fn score<R: Rng>(&self, fraction: f64, rng: &mut R) -> f64 {
        let noise: f64 = rng.sample(StandardNormal);
        logistic(self.slope * fraction.clamp(0.0, 1.0) + self.offset + self.noise_std * noise)
    }
}

pub fn simulate_low_res_label(fraction: f64, bins: &BinScheme, cfg: &LabelerConfig, seed: u64) -> usize {
    let mut rng = seed::rng(seed);
    bins.bin_of(cfg.score(fraction, &mut rng))
}

/// Label from the most confident of several sub-region scores.
pub fn simulate_low_res_label_max(fractions: &[f64], bins: &BinScheme, cfg: &LabelerConfig, seed: u64) -> usize {
    let mut rng = seed::rng(seed);
    let q = fractions.iter().map(|&f| cfg.score(f, &mut rng)).fold(0.0, f64::max);
    bins.bin_of(q)
}
