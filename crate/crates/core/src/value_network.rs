//! Residual value network Φ(s, z, y) with an analytic input gradient.
//!
//! ```text
//! h₁     = σ(K₀ h₀ + b₀),            h₀ = (s, z, y)
//! h_{j+1} = h_j + σ(K_j h_j + b_j),   j = 1..M
//! Φ      = wᵀ h_{M+1}
//! ```
//!
//! with σ(x) = log(eˣ + e⁻ˣ), so σ' = tanh. The input gradient is the
//! reverse chain
//!
//! ```text
//! v ← w;  v ← v + K_jᵀ(tanh(K_j h_j + b_j) ⊙ v)  for j = M..1
//! ∇h₀ = K₀ᵀ(tanh(K₀ h₀ + b₀) ⊙ v)
//! ```
//!
//! On a tape every factor of this chain is an ordinary node, so losses that
//! contain ∇Φ can be differentiated with first-order reverse mode only.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::{matvec, matvec_t, softplus_sym};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    /// Nodes per layer (m).
    pub width: usize,
    /// Number of residual blocks (M).
    pub depth: usize,
    pub state_dim: usize,
    pub param_dim: usize,
}

impl NetShape {
    pub fn input_dim(&self) -> usize {
        1 + self.state_dim + self.param_dim
    }
}

/// Network input `(s, z, y)`, concatenated in that order.
#[derive(Clone, Copy, Debug)]
pub struct NetInput<'a> {
    pub s: f64,
    pub z: &'a [f64],
    pub y: &'a [f64],
}

impl NetInput<'_> {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut h = Vec::with_capacity(1 + self.z.len() + self.y.len());
        h.push(self.s);
        h.extend_from_slice(self.z);
        h.extend_from_slice(self.y);
        h
    }
}

/// Input gradient split by block.
#[derive(Clone, Debug, PartialEq)]
pub struct InputGrad {
    pub ds: f64,
    pub dz: Vec<f64>,
    pub dy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueNetwork {
    shape: NetShape,
    seed: u64,
    params: ParamSet,
}

impl ValueNetwork {
    /// Opening and hidden weights ~ N(0, 1/m), zero biases, zero head, so the
    /// initial network is identically zero.
    pub fn init(shape: NetShape, seed: u64) -> Result<Self> {
        if shape.width == 0 || shape.depth == 0 {
            return Err(Error::Config(
                "value network needs width ≥ 1 and depth ≥ 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = shape.width;
        let scale = 1.0 / (m as f64).sqrt();
        let mut params = ParamSet::new();
        params.push(
            "opening.weight",
            nn::scaled_normal(&mut rng, m, shape.input_dim(), scale),
        );
        params.push("opening.bias", Tensor::zeros(&[m]));
        for j in 1..=shape.depth {
            params.push(
                format!("block{j}.weight"),
                nn::scaled_normal(&mut rng, m, m, scale),
            );
            params.push(format!("block{j}.bias"), Tensor::zeros(&[m]));
        }
        params.push("head", Tensor::zeros(&[m]));
        Ok(Self {
            shape,
            seed,
            params,
        })
    }

    /// Builds a network from explicit tensors in the layout of [`ValueNetwork::init`].
    pub fn from_params(shape: NetShape, seed: u64, params: ParamSet) -> Result<Self> {
        let reference = Self::init(shape, 0)?;
        reference.params.check_layout(&params)?;
        Ok(Self {
            shape,
            seed,
            params,
        })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn layer(&self, j: usize) -> (&[f64], &[f64]) {
        (
            self.params.get(2 * j).data(),
            self.params.get(2 * j + 1).data(),
        )
    }

    fn head(&self) -> &[f64] {
        self.params.get(2 * self.shape.depth + 2).data()
    }

    fn check_input(&self, input: &NetInput<'_>) -> Result<()> {
        if input.z.len() != self.shape.state_dim || input.y.len() != self.shape.param_dim {
            return Err(shape_err(
                "value_network",
                format!(
                    "input (z: {}, y: {}) but network expects (z: {}, y: {})",
                    input.z.len(),
                    input.y.len(),
                    self.shape.state_dim,
                    self.shape.param_dim
                ),
            ));
        }
        Ok(())
    }

    /// Hidden states h₁..h_{M+1} and the tanh factors of each layer.
    fn trace(&self, h0: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let m = self.shape.width;
        let mut hs = Vec::with_capacity(self.shape.depth + 1);
        let mut ts = Vec::with_capacity(self.shape.depth + 1);
        let mut pre = vec![0.0; m];
        let (k0, b0) = self.layer(0);
        matvec(k0, m, h0.len(), h0, &mut pre);
        let mut h: Vec<f64> = pre
            .iter()
            .zip(b0)
            .map(|(x, b)| softplus_sym(x + b))
            .collect();
        ts.push(pre.iter().zip(b0).map(|(x, b)| (x + b).tanh()).collect());
        for j in 1..=self.shape.depth {
            let (k, b) = self.layer(j);
            matvec(k, m, m, &h, &mut pre);
            ts.push(pre.iter().zip(b).map(|(x, b)| (x + b).tanh()).collect());
            hs.push(h.clone());
            for i in 0..m {
                h[i] += softplus_sym(pre[i] + b[i]);
            }
        }
        hs.push(h);
        (hs, ts)
    }

    pub fn forward(&self, input: NetInput<'_>) -> Result<f64> {
        self.check_input(&input)?;
        let (hs, _) = self.trace(&input.to_vec());
        Ok(crate::autodiff::tensor::dot(
            self.head(),
            hs.last().expect("nonempty"),
        ))
    }

    /// Φ and its gradient with respect to every input component.
    pub fn value_and_grad(&self, input: NetInput<'_>) -> Result<(f64, InputGrad)> {
        self.check_input(&input)?;
        let h0 = input.to_vec();
        let m = self.shape.width;
        let (hs, ts) = self.trace(&h0);
        let value = crate::autodiff::tensor::dot(self.head(), hs.last().expect("nonempty"));
        let mut v = self.head().to_vec();
        let mut tmp = vec![0.0; m];
        for j in (1..=self.shape.depth).rev() {
            let (k, _) = self.layer(j);
            let gated: Vec<f64> = ts[j].iter().zip(&v).map(|(t, v)| t * v).collect();
            matvec_t(k, m, m, &gated, &mut tmp);
            v.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
        }
        let gated: Vec<f64> = ts[0].iter().zip(&v).map(|(t, v)| t * v).collect();
        let mut g = vec![0.0; h0.len()];
        matvec_t(self.layer(0).0, m, h0.len(), &gated, &mut g);
        let d = self.shape.state_dim;
        Ok((
            value,
            InputGrad {
                ds: g[0],
                dz: g[1..1 + d].to_vec(),
                dy: g[1 + d..].to_vec(),
            },
        ))
    }

    pub fn grad_input(&self, input: NetInput<'_>) -> Result<InputGrad> {
        Ok(self.value_and_grad(input)?.1)
    }

    /// Places the weights on `tape` (as variables when `trainable`).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundValueNet {
        BoundValueNet {
            shape: self.shape,
            nodes: self.params.bind(tape, trainable),
        }
    }

    pub fn checkpoint_meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "value_network",
            "shape": self.shape,
            "seed": self.seed,
        })
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        nn::write_checkpoint(w, &self.checkpoint_meta(), &self.params)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let ck = nn::read_checkpoint(r)?;
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("value_network") {
            return Err(Error::Format(
                "checkpoint does not hold a value network".into(),
            ));
        }
        let shape: NetShape = serde_json::from_value(ck.meta["shape"].clone())
            .map_err(|e| Error::Format(e.to_string()))?;
        let seed = ck.meta["seed"].as_u64().unwrap_or(0);
        Self::from_params(shape, seed, ck.params)
    }
}

/// Value network whose weights live on a tape.
#[derive(Clone, Debug)]
pub struct BoundValueNet {
    shape: NetShape,
    nodes: Vec<NodeId>,
}

/// Tape nodes for Φ and its input gradient.
#[derive(Clone, Copy, Debug)]
pub struct TapeEval {
    pub value: NodeId,
    /// ∂Φ/∂s, shape `[1]`.
    pub ds: NodeId,
    /// ∇_zΦ, shape `[d]`.
    pub dz: NodeId,
    /// Full input gradient, shape `[1 + d + q]`.
    pub grad: NodeId,
}

impl BoundValueNet {
    pub fn param_nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    /// Evaluates Φ and ∇Φ at the input node `h0` (length 1 + d + q).
    pub fn eval(&self, tape: &mut Tape, h0: NodeId) -> Result<TapeEval> {
        let depth = self.shape.depth;
        let mut gates = Vec::with_capacity(depth + 1);
        let pre = tape.matvec(self.nodes[0], h0)?;
        let pre = tape.add(pre, self.nodes[1])?;
        let mut h = tape.softplus_sym(pre);
        gates.push(tape.tanh(pre));
        for j in 1..=depth {
            let pre = tape.matvec(self.nodes[2 * j], h)?;
            let pre = tape.add(pre, self.nodes[2 * j + 1])?;
            gates.push(tape.tanh(pre));
            let act = tape.softplus_sym(pre);
            h = tape.add(h, act)?;
        }
        let head = self.nodes[2 * depth + 2];
        let value = tape.dot(head, h)?;
        let mut v = head;
        for j in (1..=depth).rev() {
            let gated = tape.mul(gates[j], v)?;
            let back = tape.matvec_t(self.nodes[2 * j], gated)?;
            v = tape.add(v, back)?;
        }
        let gated = tape.mul(gates[0], v)?;
        let grad = tape.matvec_t(self.nodes[0], gated)?;
        let ds = tape.slice(grad, 0, 1)?;
        let dz = tape.slice(grad, 1, self.shape.state_dim)?;
        Ok(TapeEval {
            value,
            ds,
            dz,
            grad,
        })
    }

    /// Convenience: assembles `(s, z, y)` from nodes and evaluates.
    pub fn eval_parts(&self, tape: &mut Tape, s: f64, z: NodeId, y: &[f64]) -> Result<TapeEval> {
        let sn = tape.constant(Tensor::vector(vec![s]));
        let yn = tape.constant(Tensor::vector(y.to_vec()));
        let h0 = tape.concat(&[sn, z, yn]);
        self.eval(tape, h0)
    }
}
