//! Synthetic size regression with a known set of informative features.
//!
//! Features are drawn from `U(0, 1)`. The target is
//!
//! ```text
//! y = clamp(0.5 + 19.5 · Σ c_j x_j / Σ c_j + ε, 0.5, 20),   ε ~ N(0, σ²)
//! ```
//!
//! over the informative features `j`; nuisance features never enter `y`.
//! Feature positions are shuffled per seed.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{Sample, Target};
use crate::error::{Error, Result};
use crate::init;
use crate::metrics::BIN_EDGES_MM;
use crate::tensor::Array;

pub const SIZE_LO: f64 = 0.5;
pub const SIZE_HI: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_informative: usize,
    pub n_nuisance: usize,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    /// Informative coefficients; drawn from `U(0.5, 1.5)` when absent.
    #[serde(default)]
    pub coefficients: Option<Vec<f64>>,
    /// Consecutive samples sharing one `unique_id`.
    #[serde(default = "one")]
    pub samples_per_id: usize,
    /// Keep informative features in the leading positions.
    #[serde(default)]
    pub ordered: bool,
    /// Redraw samples whose target lies within this distance of a size-bin
    /// edge (5 or 10 mm).
    #[serde(default)]
    pub boundary_gap_mm: f64,
}

fn one() -> usize {
    1
}

impl SynthConfig {
    pub fn new(n_samples: usize, n_informative: usize, n_nuisance: usize, noise_std: f64, seed: u64) -> Self {
        Self {
            n_samples,
            n_informative,
            n_nuisance,
            noise_std,
            seed,
            coefficients: None,
            samples_per_id: 1,
            ordered: false,
            boundary_gap_mm: 0.0,
        }
    }

    pub fn n_features(&self) -> usize {
        self.n_informative + self.n_nuisance
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_informative == 0 {
            return Err(Error::config("data.synth", "n_samples and n_informative must be >= 1"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("data.synth.noise_std", "must be >= 0"));
        }
        if !(0.0..=2.0).contains(&self.boundary_gap_mm) {
            return Err(Error::config("data.synth.boundary_gap_mm", "must lie in [0, 2]"));
        }
        if self.samples_per_id == 0 {
            return Err(Error::config("data.synth.samples_per_id", "must be >= 1"));
        }
        if let Some(c) = &self.coefficients {
            if c.len() != self.n_informative || c.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::config(
                    "data.synth.coefficients",
                    "need one positive coefficient per informative feature",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub samples: Vec<Sample>,
    /// Ground-truth informative feature positions, ascending.
    pub informative: Vec<usize>,
    /// Coefficient of each informative position, in the same order.
    pub coefficients: Vec<f64>,
}

impl SynthDataset {
    /// Noise-free target of a feature vector.
    pub fn affine_target(&self, x: &[f64]) -> f64 {
        let total: f64 = self.coefficients.iter().sum();
        let s: f64 = self
            .informative
            .iter()
            .zip(&self.coefficients)
            .map(|(&j, &c)| c * x[j])
            .sum();
        SIZE_LO + (SIZE_HI - SIZE_LO) * s / total
    }
}

pub fn synth_regression_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = init::rng(cfg.seed);
    let d = cfg.n_features();
    let mut positions: Vec<usize> = (0..d).collect();
    if !cfg.ordered {
        positions.shuffle(&mut rng);
    }
    let coef_draw = Uniform::new(0.5, 1.5);
    let coefs: Vec<f64> = match &cfg.coefficients {
        Some(c) => c.clone(),
        None => (0..cfg.n_informative).map(|_| coef_draw.sample(&mut rng)).collect(),
    };
    let mut pairs: Vec<(usize, f64)> = positions[..cfg.n_informative]
        .iter()
        .copied()
        .zip(coefs)
        .collect();
    pairs.sort_by_key(|p| p.0);
    let mut ds = SynthDataset {
        samples: Vec::with_capacity(cfg.n_samples),
        informative: pairs.iter().map(|p| p.0).collect(),
        coefficients: pairs.iter().map(|p| p.1).collect(),
    };
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::config("data.synth.noise_std", e.to_string()))?;
    let near_edge = |y: f64| BIN_EDGES_MM.iter().any(|e| (y - e).abs() < cfg.boundary_gap_mm);
    for i in 0..cfg.n_samples {
        let (x, y) = loop {
            let x: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
            let eps = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let y = (ds.affine_target(&x) + eps).clamp(SIZE_LO, SIZE_HI);
            if !near_edge(y) {
                break (x, y);
            }
        };
        ds.samples.push(Sample {
            unique_id: format!("u{}", i / cfg.samples_per_id),
            sample_id: format!("s{i}"),
            input: Array::vector(&x),
            target: Target::SizeMm(y),
            fold: None,
        });
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_targets_follow_the_affine_map() {
        let cfg = SynthConfig {
            coefficients: Some(vec![1.0, 3.0]),
            ordered: true,
            ..SynthConfig::new(50, 2, 3, 0.0, 9)
        };
        let ds = synth_regression_dataset(&cfg).unwrap();
        assert_eq!(ds.informative, vec![0, 1]);
        for s in &ds.samples {
            let x = s.input.data();
            let y = 0.5 + 19.5 * (x[0] + 3.0 * x[1]) / 4.0;
            assert_eq!(s.size_mm().unwrap(), y);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = SynthConfig::new(20, 3, 3, 0.5, 4);
        assert_eq!(synth_regression_dataset(&cfg).unwrap(), synth_regression_dataset(&cfg).unwrap());
        let other = SynthConfig { seed: 5, ..cfg.clone() };
        assert_ne!(synth_regression_dataset(&cfg).unwrap(), synth_regression_dataset(&other).unwrap());
    }

    #[test]
    fn boundary_gap_keeps_targets_off_bin_edges() {
        let cfg = SynthConfig {
            boundary_gap_mm: 1.0,
            ..SynthConfig::new(200, 4, 0, 0.3, 2)
        };
        let ds = synth_regression_dataset(&cfg).unwrap();
        for s in &ds.samples {
            let y = s.size_mm().unwrap();
            assert!((y - 5.0).abs() >= 1.0 && (y - 10.0).abs() >= 1.0, "{y}");
        }
    }

    #[test]
    fn ids_group_consecutive_samples() {
        let cfg = SynthConfig {
            samples_per_id: 3,
            ..SynthConfig::new(7, 1, 0, 0.0, 0)
        };
        let ids: Vec<String> = synth_regression_dataset(&cfg)
            .unwrap()
            .samples
            .into_iter()
            .map(|s| s.unique_id)
            .collect();
        assert_eq!(ids, ["u0", "u0", "u0", "u1", "u1", "u1", "u2"]);
    }
}
