use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::conv::{conv3x3, max_pool2, FeatureShape};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::nn::{orthogonal, ParamSet};

pub const ACTION_DIM: usize = 2;

/// Convolutional trunk shared by every actor-critic network: three
/// conv3×3 → tanh → maxpool2 blocks, then two tanh dense layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvArch {
    pub grid: usize,
    pub channels: usize,
    pub conv: [usize; 3],
    pub dense: usize,
}

impl ConvArch {
    pub fn input_shape(&self) -> FeatureShape {
        FeatureShape {
            channels: self.channels,
            height: self.grid,
            width: self.grid,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.input_shape().len()
    }

    pub fn feature_shape(&self) -> FeatureShape {
        let mut s = self.input_shape();
        for &c in &self.conv {
            s = FeatureShape { channels: c, ..s }.pooled();
        }
        s
    }
}

/// Trunk plus a linear head. `extra` inputs (the action, for Q networks) are
/// appended to the flattened conv features.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    arch: ConvArch,
    extra: usize,
    outputs: usize,
    params: ParamSet,
}

const TRUNK_TENSORS: usize = 12;

impl ConvNet {
    pub fn init<R: Rng + ?Sized>(
        arch: ConvArch,
        extra: usize,
        outputs: usize,
        head_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut params = ParamSet::new();
        let mut cin = arch.channels;
        for (k, &cout) in arch.conv.iter().enumerate() {
            params.push(
                format!("conv{k}.weight"),
                orthogonal(rng, cout, cin * 9, 1.0),
            );
            params.push(format!("conv{k}.bias"), Tensor::zeros(&[cout]));
            cin = cout;
        }
        let features = arch.feature_shape().len() + extra;
        params.push("dense0.weight", orthogonal(rng, arch.dense, features, 1.0));
        params.push("dense0.bias", Tensor::zeros(&[arch.dense]));
        params.push(
            "dense1.weight",
            orthogonal(rng, arch.dense, arch.dense, 1.0),
        );
        params.push("dense1.bias", Tensor::zeros(&[arch.dense]));
        params.push(
            "head.weight",
            orthogonal(rng, outputs, arch.dense, head_gain),
        );
        params.push("head.bias", Tensor::zeros(&[outputs]));
        Self {
            arch,
            extra,
            outputs,
            params,
        }
    }

    pub fn arch(&self) -> ConvArch {
        self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `obs`: `[batch, obs_dim]`; `extra`: `[batch, extra]`. Returns
    /// `[batch, outputs]`. `nodes` are the bound trunk parameters.
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        obs: NodeId,
        extra: Option<NodeId>,
    ) -> Result<NodeId> {
        if nodes.len() < TRUNK_TENSORS {
            return Err(shape_err(
                "conv_net",
                format!("{} parameter nodes", nodes.len()),
            ));
        }
        let mut h = obs;
        let mut shape = self.arch.input_shape();
        for (k, &c) in self.arch.conv.iter().enumerate() {
            h = conv3x3(tape, h, shape, nodes[2 * k], nodes[2 * k + 1])?;
            h = tape.tanh(h);
            shape = FeatureShape {
                channels: c,
                ..shape
            };
            h = max_pool2(tape, h, shape)?;
            shape = shape.pooled();
        }
        match (extra, self.extra) {
            (Some(e), n) if n > 0 => h = tape.concat_cols(h, e)?,
            (None, 0) => {}
            _ => {
                return Err(shape_err(
                    "conv_net",
                    "extra input does not match the architecture",
                ))
            }
        }
        for k in 0..2 {
            h = tape.linear(h, nodes[6 + 2 * k])?;
            h = tape.add_row(h, nodes[7 + 2 * k])?;
            h = tape.tanh(h);
        }
        let out = tape.linear(h, nodes[10])?;
        tape.add_row(out, nodes[11])
    }

    fn outputs(&self) -> usize {
        self.outputs
    }
}

pub(crate) fn matrix_node(tape: &mut Tape, data: &[f64], cols: usize) -> Result<NodeId> {
    if cols == 0 || !data.len().is_multiple_of(cols) {
        return Err(shape_err(
            "matrix_node",
            format!("{} values in rows of {cols}", data.len()),
        ));
    }
    Ok(tape.constant(Tensor::matrix(data.len() / cols, cols, data.to_vec())?))
}

/// Diagonal Gaussian policy: a conv net for the mean and a state-independent
/// trainable log-variance per action dimension (stored as the last tensor).
#[derive(Clone, Debug, PartialEq)]
pub struct Actor {
    net: ConvNet,
}

/// Bound actor outputs: `mean` is `[batch, 2]`, `log_var` is `[2]`.
#[derive(Clone, Copy, Debug)]
pub struct PolicyNodes {
    pub mean: NodeId,
    pub log_var: NodeId,
}

impl Actor {
    pub fn init<R: Rng + ?Sized>(arch: ConvArch, init_log_var: f64, rng: &mut R) -> Self {
        let mut net = ConvNet::init(arch, 0, ACTION_DIM, 0.01, rng);
        net.params
            .push("log_var", Tensor::vector(vec![init_log_var; ACTION_DIM]));
        Self { net }
    }

    pub fn from_params(arch: ConvArch, params: ParamSet) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = Self::init(arch, 0.0, &mut rng);
        template.params().check_layout(&params)?;
        Ok(Self {
            net: ConvNet {
                params,
                ..template.net
            },
        })
    }

    pub fn arch(&self) -> ConvArch {
        self.net.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.net.params
    }

    pub fn log_var(&self) -> &[f64] {
        self.net.params.get(TRUNK_TENSORS).data()
    }

    pub fn forward(&self, tape: &mut Tape, nodes: &[NodeId], obs: NodeId) -> Result<PolicyNodes> {
        let mean = self.net.forward(tape, nodes, obs, None)?;
        Ok(PolicyNodes {
            mean,
            log_var: nodes[TRUNK_TENSORS],
        })
    }

    /// Means and log-variances for a batch of normalized observations.
    pub fn distribution(&self, obs: &[f64]) -> Result<(Vec<[f64; 2]>, [f64; 2])> {
        let mut tape = Tape::new();
        let nodes = self.params().bind(&mut tape, false);
        let x = matrix_node(&mut tape, obs, self.arch().obs_dim())?;
        let out = self.forward(&mut tape, &nodes, x)?;
        let m = tape.value(out.mean).data();
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: "actor",
                node: out.mean.index(),
            });
        }
        let lv = self.log_var();
        Ok((
            m.chunks(ACTION_DIM).map(|r| [r[0], r[1]]).collect(),
            [lv[0], lv[1]],
        ))
    }

    /// Samples `u ~ N(mean, diag(exp(log_var)))` for each row, or returns the
    /// mean when `deterministic`. Returns actions and their log-densities.
    pub fn act<R: Rng>(
        &self,
        obs: &[f64],
        rng: &mut [R],
        deterministic: bool,
    ) -> Result<Vec<([f64; 2], f64)>> {
        let (means, lv) = self.distribution(obs)?;
        if !deterministic && rng.len() != means.len() {
            return Err(shape_err(
                "act",
                format!("{} rngs for {} rows", rng.len(), means.len()),
            ));
        }
        Ok(means
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let u = if deterministic {
                    *m
                } else {
                    sample_gaussian(m, &lv, &mut rng[i])
                };
                (u, gaussian_log_prob(&u, m, &lv))
            })
            .collect())
    }

    pub fn save_meta(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "actor", "arch": self.arch() })
    }
}

/// One draw from `N(mean, diag(exp(log_var)))`.
pub fn sample_gaussian<R: Rng + ?Sized>(
    mean: &[f64; 2],
    log_var: &[f64; 2],
    rng: &mut R,
) -> [f64; 2] {
    let mut u = [0.0; 2];
    for d in 0..ACTION_DIM {
        let xi: f64 = StandardNormal.sample(rng);
        u[d] = mean[d] + (0.5 * log_var[d]).exp() * xi;
    }
    u
}

/// `log N(u; mean, diag(exp(log_var)))`.
pub fn gaussian_log_prob(u: &[f64; 2], mean: &[f64; 2], log_var: &[f64; 2]) -> f64 {
    (0..ACTION_DIM)
        .map(|d| {
            -0.5 * ((u[d] - mean[d]).powi(2) * (-log_var[d]).exp() + log_var[d] + (2.0 * PI).ln())
        })
        .sum()
}

/// Tape version of [`gaussian_log_prob`] for a batch: `actions` `[batch, 2]`
/// → `[batch]`.
pub fn log_prob_node(tape: &mut Tape, policy: PolicyNodes, actions: NodeId) -> Result<NodeId> {
    let diff = tape.sub(actions, policy.mean)?;
    let sq = tape.square(diff);
    let neg_lv = tape.neg(policy.log_var);
    let precision = tape.exp(neg_lv);
    let scaled = tape.mul_row(sq, precision)?;
    let with_lv = tape.add_row(scaled, policy.log_var)?;
    let per_row = tape.sum_cols(with_lv)?;
    let half = tape.scale(per_row, -0.5);
    Ok(tape.add_const(half, -0.5 * ACTION_DIM as f64 * (2.0 * PI).ln()))
}

/// Scalar-output conv net: a state-value critic, or a Q network when built
/// with the action as extra input.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueHead {
    net: ConvNet,
}

impl ValueHead {
    pub fn critic<R: Rng + ?Sized>(arch: ConvArch, rng: &mut R) -> Self {
        Self {
            net: ConvNet::init(arch, 0, 1, 1.0, rng),
        }
    }

    pub fn q_network<R: Rng + ?Sized>(arch: ConvArch, rng: &mut R) -> Self {
        Self {
            net: ConvNet::init(arch, ACTION_DIM, 1, 1.0, rng),
        }
    }

    pub fn takes_action(&self) -> bool {
        self.net.extra > 0
    }

    pub fn arch(&self) -> ConvArch {
        self.net.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.net.params
    }

    /// `[batch]` values.
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        obs: NodeId,
        action: Option<NodeId>,
    ) -> Result<NodeId> {
        let out = self.net.forward(tape, nodes, obs, action)?;
        debug_assert_eq!(self.net.outputs(), 1);
        let rows = tape.value(out).rows();
        tape.reshape(out, &[rows])
    }

    pub fn evaluate(&self, obs: &[f64], actions: Option<&[[f64; 2]]>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let nodes = self.params().bind(&mut tape, false);
        let x = matrix_node(&mut tape, obs, self.arch().obs_dim())?;
        let a = match actions {
            Some(a) => Some(matrix_node(&mut tape, &a.concat(), ACTION_DIM)?),
            None => None,
        };
        let v = self.forward(&mut tape, &nodes, x, a)?;
        let out = tape.value(v).data().to_vec();
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: "value_head",
                node: v.index(),
            });
        }
        Ok(out)
    }
}
