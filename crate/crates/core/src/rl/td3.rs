use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::nets::{matrix_node, Actor, ConvArch, ValueHead, ACTION_DIM};
use super::rollout::EpisodeData;
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Adam, AdamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Td3Config {
    pub gamma: f64,
    pub tau: f64,
    pub policy_delay: usize,
    pub target_noise: f64,
    pub noise_clip: f64,
    /// Std of the Gaussian exploration noise added to the actor mean.
    pub explore_std: f64,
    /// Executed and target actions are clamped to `±action_limit`.
    pub action_limit: [f64; 2],
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Transitions collected before the first update.
    pub warmup: usize,
    /// Gradient updates per collected transition.
    pub updates_per_transition: f64,
    pub max_grad_norm: Option<f64>,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            tau: 0.005,
            policy_delay: 2,
            target_noise: 0.2,
            noise_clip: 0.5,
            explore_std: 0.1,
            action_limit: [3.0, 3.0],
            batch_size: 64,
            replay_capacity: 100_000,
            warmup: 500,
            updates_per_transition: 1.0,
            max_grad_norm: None,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("discount must lie in (0, 1]".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config("soft-update rate must lie in (0, 1]".into()));
        }
        if self.policy_delay == 0 || self.batch_size == 0 || self.replay_capacity == 0 {
            return Err(Error::Config(
                "policy delay, batch size and replay capacity must be positive".into(),
            ));
        }
        if !(self.target_noise >= 0.0 && self.noise_clip >= 0.0 && self.explore_std > 0.0) {
            return Err(Error::Config(
                "noise scales must be non-negative (exploration positive)".into(),
            ));
        }
        if self.action_limit.iter().any(|l| !(*l > 0.0)) || !(self.updates_per_transition >= 0.0) {
            return Err(Error::Config("action limits must be positive".into()));
        }
        Ok(())
    }
}

/// Fixed-capacity ring buffer of transitions, sampled uniformly.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    obs: Vec<f64>,
    next_obs: Vec<f64>,
    actions: Vec<[f64; 2]>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    head: usize,
}

/// Rows drawn from the buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    pub obs: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub actions: Vec<[f64; 2]>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize) -> Self {
        Self {
            capacity,
            obs_dim,
            obs: Vec::new(),
            next_obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(
        &mut self,
        obs: &[f64],
        action: [f64; 2],
        reward: f64,
        next_obs: &[f64],
        done: bool,
    ) {
        let d = self.obs_dim;
        if self.len() < self.capacity {
            self.obs.extend_from_slice(obs);
            self.next_obs.extend_from_slice(next_obs);
            self.actions.push(action);
            self.rewards.push(reward);
            self.dones.push(done);
        } else {
            let h = self.head;
            self.obs[h * d..(h + 1) * d].copy_from_slice(obs);
            self.next_obs[h * d..(h + 1) * d].copy_from_slice(next_obs);
            self.actions[h] = action;
            self.rewards[h] = reward;
            self.dones[h] = done;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    /// Adds every step of an episode with reward `−cost`; the terminal cost
    /// is charged to the last step, which is marked done.
    pub fn push_episode(&mut self, ep: &EpisodeData) {
        let n = ep.record.steps();
        for i in 0..n {
            let done = i + 1 == n;
            let mut cost = ep.record.rewards[i];
            if done {
                cost += ep.record.rewards[n];
            }
            self.push(
                &ep.observations[i],
                ep.record.controls[i],
                -cost,
                &ep.observations[i + 1],
                done,
            );
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, size: usize) -> Minibatch {
        let d = self.obs_dim;
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        Minibatch {
            obs: idx
                .iter()
                .flat_map(|&i| self.obs[i * d..(i + 1) * d].iter().copied())
                .collect(),
            next_obs: idx
                .iter()
                .flat_map(|&i| self.next_obs[i * d..(i + 1) * d].iter().copied())
                .collect(),
            actions: idx.iter().map(|&i| self.actions[i]).collect(),
            rewards: idx.iter().map(|&i| self.rewards[i]).collect(),
            dones: idx.iter().map(|&i| self.dones[i]).collect(),
        }
    }
}

/// Actor, twin critics, their target copies and optimizers.
#[derive(Clone, Debug)]
pub struct Td3Agent {
    pub actor: Actor,
    pub actor_target: Actor,
    pub critics: [ValueHead; 2],
    pub critic_targets: [ValueHead; 2],
    actor_opt: Adam,
    critic_opts: [Adam; 2],
    critic_updates: u64,
}

impl Td3Agent {
    pub fn init<R: Rng + ?Sized>(arch: ConvArch, adam: AdamConfig, rng: &mut R) -> Self {
        let actor = Actor::init(arch, 0.0, rng);
        let critics = [
            ValueHead::q_network(arch, rng),
            ValueHead::q_network(arch, rng),
        ];
        Self {
            actor_opt: Adam::new(actor.params(), adam),
            critic_opts: [
                Adam::new(critics[0].params(), adam),
                Adam::new(critics[1].params(), adam),
            ],
            actor_target: actor.clone(),
            critic_targets: critics.clone(),
            actor,
            critics,
            critic_updates: 0,
        }
    }

    pub fn critic_updates(&self) -> u64 {
        self.critic_updates
    }

    /// Blends every target network toward its online copy.
    pub fn soft_update_targets(&mut self, tau: f64) -> Result<()> {
        self.actor_target
            .params_mut()
            .soft_update(self.actor.params(), tau)?;
        for k in 0..2 {
            self.critic_targets[k]
                .params_mut()
                .soft_update(self.critics[k].params(), tau)?;
        }
        Ok(())
    }
}

/// Per-row target-critic values at the smoothed target action and the
/// resulting Bellman target `r + γ(1−done)·min(Q₁', Q₂')`.
#[derive(Clone, Debug, PartialEq)]
pub struct TwinTargets {
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    pub target: Vec<f64>,
}

pub fn twin_targets<R: Rng + ?Sized>(
    agent: &Td3Agent,
    mb: &Minibatch,
    cfg: &Td3Config,
    rng: &mut R,
) -> Result<TwinTargets> {
    let (means, _) = agent.actor_target.distribution(&mb.next_obs)?;
    let smoothed: Vec<[f64; 2]> = means
        .iter()
        .map(|m| {
            let mut a = [0.0; 2];
            for d in 0..ACTION_DIM {
                let xi: f64 = StandardNormal.sample(rng);
                let eps = (cfg.target_noise * xi).clamp(-cfg.noise_clip, cfg.noise_clip);
                a[d] = (m[d] + eps).clamp(-cfg.action_limit[d], cfg.action_limit[d]);
            }
            a
        })
        .collect();
    let q1 = agent.critic_targets[0].evaluate(&mb.next_obs, Some(&smoothed))?;
    let q2 = agent.critic_targets[1].evaluate(&mb.next_obs, Some(&smoothed))?;
    let target = (0..mb.rewards.len())
        .map(|i| {
            let cont = if mb.dones[i] { 0.0 } else { cfg.gamma };
            mb.rewards[i] + cont * q1[i].min(q2[i])
        })
        .collect();
    Ok(TwinTargets { q1, q2, target })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Td3Stats {
    pub critic_loss: f64,
    /// `None` when the actor step was delayed.
    pub actor_loss: Option<f64>,
}

fn q_regression(
    tape: &mut Tape,
    q: &ValueHead,
    nodes: &[NodeId],
    mb: &Minibatch,
    target: &[f64],
) -> Result<NodeId> {
    let obs = matrix_node(tape, &mb.obs, q.arch().obs_dim())?;
    let act = matrix_node(tape, &mb.actions.concat(), ACTION_DIM)?;
    let v = q.forward(tape, nodes, obs, Some(act))?;
    let t = tape.constant(Tensor::vector(target.to_vec()));
    let e = tape.sub(v, t)?;
    let e = tape.square(e);
    Ok(tape.mean(e))
}

/// One critic update on a sampled minibatch; every `policy_delay`-th call
/// also steps the actor on `−mean Q₁(o, μ(o))` and blends the targets.
pub fn td3_update<R: Rng + ?Sized>(
    agent: &mut Td3Agent,
    buffer: &ReplayBuffer,
    cfg: &Td3Config,
    lr: f64,
    rng: &mut R,
) -> Result<Td3Stats> {
    if buffer.is_empty() {
        return Err(Error::Config("empty replay buffer".into()));
    }
    let mb = buffer.sample(rng, cfg.batch_size);
    let targets = twin_targets(agent, &mb, cfg, rng)?;
    let mut stats = Td3Stats::default();
    for k in 0..2 {
        let mut tape = Tape::new();
        let nodes = agent.critics[k].params().bind(&mut tape, true);
        let l = q_regression(&mut tape, &agent.critics[k], &nodes, &mb, &targets.target)?;
        let lv = tape.scalar(l);
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                op: "td3_critic_loss",
                node: l.index(),
            });
        }
        stats.critic_loss += lv;
        let g = tape.backward(l)?;
        let mut g = agent.critics[k].params().collect_grads(&g, &nodes);
        if let Some(m) = cfg.max_grad_norm {
            clip_grad_norm(&mut g, m);
        }
        agent.critic_opts[k].step(agent.critics[k].params_mut(), &g, lr)?;
    }
    agent.critic_updates += 1;

    if agent.critic_updates.is_multiple_of(cfg.policy_delay as u64) {
        let mut tape = Tape::new();
        let an = agent.actor.params().bind(&mut tape, true);
        let qn = agent.critics[0].params().bind(&mut tape, false);
        let obs = matrix_node(&mut tape, &mb.obs, agent.actor.arch().obs_dim())?;
        let pol = agent.actor.forward(&mut tape, &an, obs)?;
        // The critic only sees actions inside the box. Outside it the clamp
        // has no gradient, so a quadratic penalty on the excess pulls μ back.
        let rows = mb.rewards.len();
        let lo: Vec<f64> = (0..rows)
            .flat_map(|_| cfg.action_limit.map(|l| -l))
            .collect();
        let hi: Vec<f64> = (0..rows).flat_map(|_| cfg.action_limit).collect();
        let lo = matrix_node(&mut tape, &lo, ACTION_DIM)?;
        let hi = matrix_node(&mut tape, &hi, ACTION_DIM)?;
        let a = tape.minimum(pol.mean, hi)?;
        let a = tape.maximum(a, lo)?;
        let q = agent.critics[0].forward(&mut tape, &qn, obs, Some(a))?;
        let above = tape.sub(pol.mean, hi)?;
        let above = tape.relu(above);
        let below = tape.sub(lo, pol.mean)?;
        let below = tape.relu(below);
        let excess = tape.add(above, below)?;
        let excess = tape.square(excess);
        let penalty = tape.mean(excess);
        let m = tape.mean(q);
        let gain = tape.neg(m);
        let loss = tape.add(gain, penalty)?;
        let lv = tape.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                op: "td3_actor_loss",
                node: loss.index(),
            });
        }
        let g = tape.backward(loss)?;
        let mut g = agent.actor.params().collect_grads(&g, &an);
        if let Some(m) = cfg.max_grad_norm {
            clip_grad_norm(&mut g, m);
        }
        agent.actor_opt.step(agent.actor.params_mut(), &g, lr)?;
        agent.soft_update_targets(cfg.tau)?;
        stats.actor_loss = Some(lv);
    }
    Ok(stats)
}
