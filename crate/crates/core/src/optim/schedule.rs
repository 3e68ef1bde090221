use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine annealing with warm restarts, stepped once per optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub eta_min: f64,
    /// Length of the first cycle in steps.
    pub t0: usize,
    #[serde(default = "one")]
    pub mult: usize,
}

fn one() -> usize {
    1
}

impl ScheduleConfig {
    pub fn validate(&self, field: &str, eta_max: f64) -> Result<()> {
        if self.t0 == 0 || self.mult == 0 {
            return Err(Error::config(field, "t0 and mult must be positive"));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= eta_max) {
            return Err(Error::config(field, "need 0 <= eta_min <= lr"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineWarmRestarts {
    pub eta_min: f64,
    pub eta_max: f64,
    pub t_i: usize,
    pub t_cur: usize,
    pub mult: usize,
}

impl CosineWarmRestarts {
    pub fn new(eta_max: f64, cfg: &ScheduleConfig) -> Self {
        Self {
            eta_min: cfg.eta_min,
            eta_max,
            t_i: cfg.t0,
            t_cur: 0,
            mult: cfg.mult,
        }
    }

    pub fn lr(&self) -> f64 {
        let phase = std::f64::consts::PI * self.t_cur as f64 / self.t_i as f64;
        let lr = self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + phase.cos());
        lr.clamp(self.eta_min, self.eta_max)
    }

    /// Advances one step; after a step taken at `t_cur == t_i` the cycle restarts.
    pub fn step(&mut self) {
        if self.t_cur >= self.t_i {
            self.t_cur = 0;
            self.t_i *= self.mult;
        } else {
            self.t_cur += 1;
        }
    }
}
