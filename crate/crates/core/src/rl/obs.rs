use serde::{Deserialize, Serialize};

use crate::env::{Setup, State};
use crate::error::{Error, Result};

/// Number of observation channels: concentration, sink position, time and one
/// broadcast channel per problem parameter.
pub fn channel_count(setup: Setup) -> usize {
    3 + setup.param_dim()
}

/// Builds the channel stack for one state. Channel 0 is the concentration in
/// node order (rows along x₂); the rest are constant broadcasts.
pub fn observe(s: f64, z: &State, y: &[f64], grid: usize) -> Vec<f64> {
    let cells = grid * grid;
    debug_assert_eq!(z.a.len(), cells);
    let mut obs = Vec::with_capacity((3 + y.len()) * cells);
    obs.extend_from_slice(&z.a);
    for v in [z.alpha, s].into_iter().chain(y.iter().copied()) {
        obs.extend(std::iter::repeat_n(v, cells));
    }
    obs
}

/// Elementwise exponential-moving-average estimate of observation mean and
/// variance. The first batch initializes the estimate directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaNormalizer {
    pub rate: f64,
    pub eps: f64,
    pub clip: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub batches: u64,
}

impl EmaNormalizer {
    pub fn new(dim: usize, rate: f64, eps: f64, clip: f64) -> Self {
        Self {
            rate,
            eps,
            clip,
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            batches: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Folds a batch of raw observations (`rows` × `dim`, row-major) into
    /// the estimate.
    pub fn update(&mut self, batch: &[f64]) -> Result<()> {
        let d = self.dim();
        if d == 0 || batch.is_empty() || !batch.len().is_multiple_of(d) {
            return Err(Error::Config(format!(
                "normalizer batch of {} values for dim {d}",
                batch.len()
            )));
        }
        let rows = (batch.len() / d) as f64;
        let mut mu = vec![0.0; d];
        for row in batch.chunks(d) {
            for (m, x) in mu.iter_mut().zip(row) {
                *m += x;
            }
        }
        mu.iter_mut().for_each(|m| *m /= rows);
        let mut var = vec![0.0; d];
        for row in batch.chunks(d) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mu) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= rows);
        if self.batches == 0 {
            self.mean = mu;
            self.var = var;
        } else {
            let r = self.rate;
            for i in 0..d {
                self.mean[i] = (1.0 - r) * self.mean[i] + r * mu[i];
                self.var[i] = (1.0 - r) * self.var[i] + r * var[i];
            }
        }
        self.batches += 1;
        Ok(())
    }

    /// `(x − mean)/√(var + eps)`, clipped to `±clip`. Leaves the estimate
    /// untouched.
    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        let d = self.dim();
        obs.iter()
            .enumerate()
            .map(|(i, x)| {
                let j = i % d;
                ((x - self.mean[j]) / (self.var[j] + self.eps).sqrt()).clamp(-self.clip, self.clip)
            })
            .collect()
    }
}
