use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::Fnv;

/// Karras-style σ grid: `N` levels from `sigma_max` down to `sigma_min`,
/// followed by a terminal `0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub num_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.01,
            sigma_max: 10.0,
            rho: 7.0,
            num_steps: 64,
        }
    }
}

impl NoiseSchedule {
    pub fn with_steps(mut self, n: usize) -> Self {
        self.num_steps = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_min > 0.0
            && self.sigma_max > self.sigma_min
            && self.sigma_max.is_finite()
            && self.rho > 0.0
            && self.num_steps >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid noise schedule {self:?}")))
        }
    }

    /// `σ_0 > σ_1 > … > σ_{N-1} = sigma_min > σ_N = 0`, length `N + 1`.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.num_steps;
        let inv = 1.0 / self.rho;
        let (hi, lo) = (self.sigma_max.powf(inv), self.sigma_min.powf(inv));
        let mut g: Vec<f64> = (0..n)
            .map(|i| {
                let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                (hi + frac * (lo - hi)).powf(self.rho)
            })
            .collect();
        if n > 1 {
            g[n - 1] = self.sigma_min;
        }
        g[0] = self.sigma_max;
        g.push(0.0);
        g
    }

    pub fn hash(&self) -> u64 {
        Fnv::new()
            .f64(self.sigma_min)
            .f64(self.sigma_max)
            .f64(self.rho)
            .u64(self.num_steps as u64)
            .finish()
    }
}
