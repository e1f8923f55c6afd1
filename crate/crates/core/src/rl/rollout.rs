use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::nets::{gaussian_log_prob, sample_gaussian, Actor, ValueHead};
use super::obs::{observe, EmaNormalizer};
use crate::env::{EpisodeRecord, FemSystem, ProblemParams, SolveCounter, State};
use crate::error::{Error, Result};

/// How actions are chosen during collection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Exploration {
    /// Sample from the actor's Gaussian (on-policy methods).
    Sample,
    /// The actor mean.
    Mean,
    /// Mean plus independent N(0, std²) noise, clamped to `±limit`.
    MeanPlusNoise { std: f64, limit: [f64; 2] },
}

/// One collected episode. Observation vectors cover `s₀..s_N` (the last one
/// is terminal); `log_probs` cover the N actions.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeData {
    pub params: ProblemParams,
    pub record: EpisodeRecord,
    pub raw_observations: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
}

/// Runs one episode per system in lockstep with frozen actor weights and
/// normalizer statistics. Each environment draws from its own generator, so
/// the output does not depend on how environments are grouped. A failing
/// environment is dropped from the result.
pub fn collect_episodes(
    actor: &Actor,
    normalizer: &EmaNormalizer,
    systems: &[FemSystem],
    exploration: Exploration,
    rngs: &mut [ChaCha8Rng],
    counter: &SolveCounter,
) -> Result<Vec<EpisodeData>> {
    if systems.is_empty() || rngs.len() != systems.len() {
        return Err(Error::Config(format!(
            "{} environments with {} generators",
            systems.len(),
            rngs.len()
        )));
    }
    let grid = actor.arch().grid;
    if systems.iter().any(|s| s.config.grid != grid) {
        return Err(Error::Config(
            "environment grid does not match the actor".into(),
        ));
    }
    let steps = systems[0].config.steps;
    let ys: Vec<Vec<f64>> = systems.iter().map(|s| s.params.as_vec()).collect();
    let mut states: Vec<State> = systems.iter().map(|s| s.initial_state()).collect();
    let mut out: Vec<EpisodeData> = systems
        .iter()
        .map(|s| EpisodeData {
            params: s.params,
            record: EpisodeRecord::with_capacity(steps, s.config.dt),
            raw_observations: Vec::with_capacity(steps + 1),
            observations: Vec::with_capacity(steps + 1),
            log_probs: Vec::with_capacity(steps),
        })
        .collect();
    let mut alive = vec![true; systems.len()];

    for i in 0..steps {
        let live: Vec<usize> = (0..systems.len()).filter(|&e| alive[e]).collect();
        if live.is_empty() {
            break;
        }
        let mut batch = Vec::new();
        for &e in &live {
            let raw = observe(systems[e].time(i), &states[e], &ys[e], grid);
            let norm = normalizer.normalize(&raw);
            batch.extend_from_slice(&norm);
            out[e].raw_observations.push(raw);
            out[e].observations.push(norm);
        }
        let (means, log_var) = actor.distribution(&batch)?;
        let mut actions = Vec::with_capacity(live.len());
        for (k, &e) in live.iter().enumerate() {
            let m = means[k];
            let u = match exploration {
                Exploration::Sample => sample_gaussian(&m, &log_var, &mut rngs[e]),
                Exploration::Mean => m,
                Exploration::MeanPlusNoise { std, limit } => {
                    let noise = sample_gaussian(&[0.0, 0.0], &[2.0 * std.ln(); 2], &mut rngs[e]);
                    [
                        (m[0] + noise[0]).clamp(-limit[0], limit[0]),
                        (m[1] + noise[1]).clamp(-limit[1], limit[1]),
                    ]
                }
            };
            out[e].log_probs.push(gaussian_log_prob(&u, &m, &log_var));
            actions.push(u);
        }
        let next: Vec<Result<State>> = live
            .par_iter()
            .zip(&actions)
            .map(|(&e, u)| systems[e].step(&states[e], *u, counter))
            .collect();
        for ((&e, u), z) in live.iter().zip(actions).zip(next) {
            match z {
                Ok(z) => {
                    let sys = &systems[e];
                    let prev = std::mem::replace(&mut states[e], z);
                    out[e]
                        .record
                        .push_step(sys.time(i), prev, u, sys.running_cost(u));
                }
                Err(err) => {
                    log::warn!(
                        "environment {e} ({:?}) failed at step {i}: {err}",
                        systems[e].params
                    );
                    alive[e] = false;
                }
            }
        }
    }

    let mut done = Vec::with_capacity(systems.len());
    for (e, (mut ep, z)) in out.into_iter().zip(states).enumerate() {
        if !alive[e] {
            continue;
        }
        let sys = &systems[e];
        let raw = observe(sys.time(steps), &z, &ys[e], grid);
        ep.observations.push(normalizer.normalize(&raw));
        ep.raw_observations.push(raw);
        let terminal = sys.terminal_cost(&z.a);
        ep.record.finish(sys.time(steps), z, terminal);
        done.push(ep);
    }
    if done.is_empty() {
        return Err(Error::Diverged {
            iter: 0,
            detail: "every environment failed during collection".into(),
        });
    }
    Ok(done)
}

/// Cost-to-go `R_i = r_i + γ·R_{i+1}`, `R_N = r_N`, for a reward sequence
/// whose last entry is the terminal cost.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        acc = if i + 1 == rewards.len() {
            rewards[i]
        } else {
            rewards[i] + gamma * acc
        };
        out[i] = acc;
    }
    out
}

/// Generalized advantage estimates for one episode. `rewards` has N+1
/// entries (the last is the terminal cost, whose value is known exactly);
/// `values` are the critic's estimates at the N decision states. Returns
/// `(advantages, value targets)`.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = values.len();
    debug_assert_eq!(rewards.len(), n + 1);
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for i in (0..n).rev() {
        let next = if i + 1 < n { values[i + 1] } else { rewards[n] };
        let delta = rewards[i] + gamma * next - values[i];
        acc = delta + gamma * lambda * acc;
        adv[i] = acc;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

/// Flattened on-policy training data. Rewards here are per-step costs, so
/// a positive advantage marks a worse-than-expected action.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub obs_dim: usize,
    pub observations: Vec<f64>,
    pub actions: Vec<[f64; 2]>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub returns: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

impl TransitionBatch {
    pub fn from_episodes(
        episodes: &[EpisodeData],
        critic: &ValueHead,
        gamma: f64,
        lambda: f64,
    ) -> Result<Self> {
        let obs_dim = critic.arch().obs_dim();
        let mut b = Self {
            obs_dim,
            observations: Vec::new(),
            actions: Vec::new(),
            log_probs: Vec::new(),
            rewards: Vec::new(),
            returns: Vec::new(),
            values: Vec::new(),
            advantages: Vec::new(),
            value_targets: Vec::new(),
        };
        for ep in episodes {
            let n = ep.record.steps();
            let obs: Vec<f64> = ep.observations[..n].concat();
            let values = critic.evaluate(&obs, None)?;
            let returns = returns_to_go(&ep.record.rewards, gamma);
            let (adv, targets) = gae(&ep.record.rewards, &values, gamma, lambda);
            b.observations.extend_from_slice(&obs);
            b.actions.extend_from_slice(&ep.record.controls);
            b.log_probs.extend_from_slice(&ep.log_probs);
            b.rewards.extend_from_slice(&ep.record.rewards[..n]);
            b.returns.extend_from_slice(&returns[..n]);
            b.values.extend(values);
            b.advantages.extend(adv);
            b.value_targets.extend(targets);
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn observation_rows(&self, idx: &[usize]) -> Vec<f64> {
        let d = self.obs_dim;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&self.observations[i * d..(i + 1) * d]);
        }
        out
    }
}
