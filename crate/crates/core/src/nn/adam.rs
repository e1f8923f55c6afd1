use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Exponential decay with a floor: `max(floor, lr0·decay^k)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub lr0: f64,
    pub decay: f64,
    pub floor: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            lr0: lr,
            decay: 1.0,
            floor: lr,
        }
    }

    pub fn at(&self, k: usize) -> f64 {
        (self.lr0 * self.decay.powi(k as i32)).max(self.floor)
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: params.zero_grads(),
            v: params.zero_grads(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam step. Non-finite gradients are rejected
    /// before any weight is touched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape {
                op: "adam",
                detail: format!("{} gradients for {} tensors", grads.len(), params.len()),
            });
        }
        if let Some(i) = grads.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite {
                op: "adam",
                node: i,
            });
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (k, t) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.step(&mut p, &[vec![3.0, -0.1, 0.0]], 0.1).unwrap();
        let w = p.get(0).data();
        assert!((w[0] - 0.9).abs() < 1e-8);
        assert!((w[1] + 1.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::vector(vec![4.0, -3.0]));
        let mut adam = Adam::new(&p, AdamConfig::default());
        for _ in 0..2000 {
            let g: Vec<f64> = p.get(0).data().iter().map(|x| 2.0 * (x - 1.0)).collect();
            adam.step(&mut p, &[g], 0.05).unwrap();
        }
        assert!(p.get(0).data().iter().all(|x| (x - 1.0).abs() < 1e-3));
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::vector(vec![1.0]));
        let mut adam = Adam::new(&p, AdamConfig::default());
        assert!(adam.step(&mut p, &[vec![f64::NAN]], 0.1).is_err());
        assert_eq!(p.get(0).data(), &[1.0]);
    }

    #[test]
    fn schedule_decays_to_floor() {
        let s = LrSchedule {
            lr0: 0.075,
            decay: 0.975,
            floor: 0.0025,
        };
        assert_eq!(s.at(0), 0.075);
        assert!((s.at(1) - 0.073125).abs() < 1e-15);
        assert_eq!(s.at(1000), 0.0025);
    }
}
