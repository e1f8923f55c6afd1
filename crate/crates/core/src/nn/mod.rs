//! Shared plumbing for trainable networks: named parameter sets, Adam,
//! initializers and the binary checkpoint format.

mod adam;
mod checkpoint;
mod init;

pub use adam::{Adam, AdamConfig, LrSchedule};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use init::{orthogonal, scaled_normal};

use crate::autodiff::{Gradients, NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Ordered collection of named weight tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Copies every tensor onto `tape`, as variables when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.variable(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Gradients for nodes produced by [`ParamSet::bind`]; missing entries are zero.
    pub fn collect_grads(&self, grads: &Gradients, nodes: &[NodeId]) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .zip(nodes)
            .map(|(t, &n)| grads.get_or_zeros(n, t.len()))
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }

    /// Polyak blend `self ← τ·src + (1−τ)·self`.
    pub fn soft_update(&mut self, src: &ParamSet, tau: f64) -> Result<()> {
        self.check_layout(src)?;
        for (dst, s) in self.tensors.iter_mut().zip(&src.tensors) {
            if tau == 1.0 {
                dst.data_mut().copy_from_slice(s.data());
            } else {
                for (d, v) in dst.data_mut().iter_mut().zip(s.data()) {
                    *d = tau * v + (1.0 - tau) * *d;
                }
            }
        }
        Ok(())
    }

    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len()
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Format("parameter layouts differ".into()));
        }
        Ok(())
    }

    /// Flattened copy of all weights.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Format(format!(
                "expected {} weights, got {}",
                self.numel(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Elementwise sum of gradient lists (ordered reduction).
pub fn add_grads(acc: &mut [Vec<f64>], g: &[Vec<f64>]) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

pub fn scale_grads(g: &mut [Vec<f64>], c: f64) {
    g.iter_mut()
        .flat_map(|v| v.iter_mut())
        .for_each(|x| *x *= c);
}

/// Global L2 norm over a gradient list.
pub fn grad_norm(g: &[Vec<f64>]) -> f64 {
    g.iter()
        .flat_map(|v| v.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `g` in place so its global norm is at most `max_norm`.
pub fn clip_grad_norm(g: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let n = grad_norm(g);
    if n > max_norm && n > 0.0 {
        scale_grads(g, max_norm / n);
    }
    n
}
