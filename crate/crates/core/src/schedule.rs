use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear beta schedule on the training grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_steps: usize,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            beta_start: 1e-4,
            beta_end: 2e-2,
            train_steps: 1000,
        }
    }
}

impl BetaSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.train_steps < 2 {
            return Err(Error::config("schedule.train_steps", "must be >= 2"));
        }
        if !(self.beta_start > 0.0 && self.beta_end < 1.0 && self.beta_start <= self.beta_end) {
            return Err(Error::config(
                "schedule.beta_start",
                "betas must satisfy 0 < beta_start <= beta_end < 1",
            ));
        }
        Ok(())
    }

    pub fn betas(&self) -> Vec<f64> {
        let n = self.train_steps;
        (0..n)
            .map(|i| self.beta_start + (self.beta_end - self.beta_start) * i as f64 / (n - 1) as f64)
            .collect()
    }

    pub fn alphas_cumprod(&self) -> Vec<f64> {
        let mut acc = 1.0;
        self.betas()
            .into_iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect()
    }
}
