use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nets::{log_prob_node, matrix_node, Actor, ValueHead, ACTION_DIM};
use super::rollout::TransitionBatch;
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Adam};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Weight of the critic's squared error in the combined loss.
    pub critic_weight: f64,
    /// Remaining epochs are skipped once a minibatch's approximate KL
    /// divergence from the collection policy exceeds this.
    pub target_kl: Option<f64>,
    pub max_grad_norm: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            epochs: 4,
            minibatch: 64,
            gamma: 1.0,
            gae_lambda: 0.95,
            critic_weight: 0.5,
            target_kl: Some(0.05),
            max_grad_norm: Some(0.5),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("discount must lie in (0, 1]".into()));
        }
        if !(self.clip > 0.0) || !(self.critic_weight >= 0.0) {
            return Err(Error::Config(
                "clip must be positive and critic weight non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("GAE lambda must lie in [0, 1]".into()));
        }
        if self.epochs == 0 || self.minibatch == 0 {
            return Err(Error::Config(
                "epochs and minibatch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Advantages shifted and scaled to zero mean and unit variance over the
/// batch. An all-zero input stays zero.
pub fn normalized_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len().max(1) as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let scale = 1.0 / (var.sqrt() + 1e-8);
    adv.iter().map(|a| (a - mean) * scale).collect()
}

/// Policy part of the loss (to be minimized; advantages are in cost units).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PolicyObjective {
    /// `mean(max(ρ·A, clip(ρ, 1 ± ε)·A))` with `ρ = π/π_old`.
    Clipped(f64),
    /// `mean(log π · A)`, the plain score-function estimator.
    Reinforce,
}

struct PolicyTerms {
    loss: NodeId,
    log_prob: NodeId,
}

fn policy_terms(
    tape: &mut Tape,
    actor: &Actor,
    nodes: &[NodeId],
    batch: &TransitionBatch,
    idx: &[usize],
    advantages: &[f64],
    objective: PolicyObjective,
) -> Result<PolicyTerms> {
    let obs = matrix_node(tape, &batch.observation_rows(idx), batch.obs_dim)?;
    let actions: Vec<f64> = idx.iter().flat_map(|&i| batch.actions[i]).collect();
    let actions = matrix_node(tape, &actions, ACTION_DIM)?;
    let adv = tape.constant(Tensor::vector(idx.iter().map(|&i| advantages[i]).collect()));
    let policy = actor.forward(tape, nodes, obs)?;
    let log_prob = log_prob_node(tape, policy, actions)?;
    let per_sample = match objective {
        PolicyObjective::Clipped(eps) => {
            let old = tape.constant(Tensor::vector(
                idx.iter().map(|&i| batch.log_probs[i]).collect(),
            ));
            let diff = tape.sub(log_prob, old)?;
            let ratio = tape.exp(diff);
            let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
            let a = tape.mul(ratio, adv)?;
            let b = tape.mul(clipped, adv)?;
            tape.maximum(a, b)?
        }
        PolicyObjective::Reinforce => tape.mul(log_prob, adv)?,
    };
    Ok(PolicyTerms {
        loss: tape.mean(per_sample),
        log_prob,
    })
}

/// Policy loss and its actor-weight gradient over the given rows, using
/// per-batch normalized advantages.
pub fn policy_gradient(
    actor: &Actor,
    batch: &TransitionBatch,
    idx: &[usize],
    objective: PolicyObjective,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let adv = normalized_advantages(&batch.advantages);
    let mut tape = Tape::new();
    let nodes = actor.params().bind(&mut tape, true);
    let t = policy_terms(&mut tape, actor, &nodes, batch, idx, &adv, objective)?;
    let loss = tape.scalar(t.loss);
    let g = tape.backward(t.loss)?;
    Ok((loss, actor.params().collect_grads(&g, &nodes)))
}

/// `π(u|o)/π_old(u|o)` for every stored transition under the current actor.
pub fn policy_ratios(actor: &Actor, batch: &TransitionBatch) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let (means, lv) = actor.distribution(&batch.observation_rows(&idx))?;
    Ok(idx
        .iter()
        .map(|&i| {
            (super::nets::gaussian_log_prob(&batch.actions[i], &means[i], &lv) - batch.log_probs[i])
                .exp()
        })
        .collect())
}

/// Squared-error critic loss `mean((V − target)²)` on the given rows.
fn critic_loss(
    tape: &mut Tape,
    critic: &ValueHead,
    nodes: &[NodeId],
    batch: &TransitionBatch,
    idx: &[usize],
) -> Result<NodeId> {
    let obs = matrix_node(tape, &batch.observation_rows(idx), batch.obs_dim)?;
    let v = critic.forward(tape, nodes, obs, None)?;
    let target = tape.constant(Tensor::vector(
        idx.iter().map(|&i| batch.value_targets[i]).collect(),
    ));
    let err = tape.sub(v, target)?;
    let sq = tape.square(err);
    Ok(tape.mean(sq))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub minibatch_steps: usize,
    pub stopped_early: bool,
}

/// Several epochs of shuffled minibatch Adam steps on the clipped surrogate
/// plus the weighted critic loss. Stats are averaged over applied steps.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<R: Rng + ?Sized>(
    actor: &mut Actor,
    critic: &mut ValueHead,
    actor_opt: &mut Adam,
    critic_opt: &mut Adam,
    batch: &TransitionBatch,
    cfg: &PpoConfig,
    lr: f64,
    rng: &mut R,
) -> Result<PpoStats> {
    if batch.is_empty() {
        return Err(Error::Config("empty transition batch".into()));
    }
    let adv = normalized_advantages(&batch.advantages);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut stats = PpoStats::default();
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch) {
            let mut tape = Tape::new();
            let an = actor.params().bind(&mut tape, true);
            let cn = critic.params().bind(&mut tape, true);
            let p = policy_terms(
                &mut tape,
                actor,
                &an,
                batch,
                idx,
                &adv,
                PolicyObjective::Clipped(cfg.clip),
            )?;
            let v = critic_loss(&mut tape, critic, &cn, batch, idx)?;
            let weighted = tape.scale(v, cfg.critic_weight);
            let parts = tape.concat(&[p.loss, weighted]);
            let total = tape.sum(parts);
            if !tape.scalar(total).is_finite() {
                return Err(Error::NonFinite {
                    op: "ppo_loss",
                    node: total.index(),
                });
            }

            let new_lp = tape.value(p.log_prob).data();
            let (mut kl, mut clipped) = (0.0, 0usize);
            for (k, &i) in idx.iter().enumerate() {
                let d = batch.log_probs[i] - new_lp[k];
                kl += d;
                if ((-d).exp() - 1.0).abs() > cfg.clip {
                    clipped += 1;
                }
            }
            kl /= idx.len() as f64;
            if cfg.target_kl.is_some_and(|t| kl > t) {
                log::debug!("ppo: approximate KL {kl:.3e} past target, stopping epochs");
                stats.stopped_early = true;
                break 'epochs;
            }

            let g = tape.backward(total)?;
            let mut ga = actor.params().collect_grads(&g, &an);
            let mut gc = critic.params().collect_grads(&g, &cn);
            if let Some(m) = cfg.max_grad_norm {
                clip_grad_norm(&mut ga, m);
                clip_grad_norm(&mut gc, m);
            }
            actor_opt.step(actor.params_mut(), &ga, lr)?;
            critic_opt.step(critic.params_mut(), &gc, lr)?;

            stats.policy_loss += tape.scalar(p.loss);
            stats.value_loss += tape.scalar(v);
            stats.approx_kl += kl;
            stats.clip_fraction += clipped as f64 / idx.len() as f64;
            stats.minibatch_steps += 1;
        }
    }
    if stats.minibatch_steps > 0 {
        let n = stats.minibatch_steps as f64;
        stats.policy_loss /= n;
        stats.value_loss /= n;
        stats.approx_kl /= n;
        stats.clip_fraction /= n;
    }
    if !actor.params().is_finite() || !critic.params().is_finite() {
        return Err(Error::Diverged {
            iter: 0,
            detail: "non-finite weights after PPO update".into(),
        });
    }
    Ok(stats)
}

/// Critic-only regression steps on a fixed batch; returns the loss before
/// each step.
pub fn fit_critic(
    critic: &mut ValueHead,
    opt: &mut Adam,
    batch: &TransitionBatch,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let cn = critic.params().bind(&mut tape, true);
        let l = critic_loss(&mut tape, critic, &cn, batch, &idx)?;
        history.push(tape.scalar(l));
        let g = tape.backward(l)?;
        let g = critic.params().collect_grads(&g, &cn);
        opt.step(critic.params_mut(), &g, lr)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::relative_error;
    use crate::env::{EnvConfig, FemSystem, ProblemParams, Setup, SolveCounter};
    use crate::nn::AdamConfig;
    use crate::rl::nets::ConvArch;
    use crate::rl::obs::EmaNormalizer;
    use crate::rl::rollout::{collect_episodes, Exploration};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        actor: Actor,
        critic: ValueHead,
        batch: TransitionBatch,
    }

    fn fixture() -> Fixture {
        let env = EnvConfig {
            grid: 6,
            steps: 5,
            ..EnvConfig::for_setup(Setup::Horizontal)
        };
        let systems: Vec<_> = [(0.12, 0.3), (0.2, 0.7), (0.15, 0.5), (0.22, 0.45)]
            .iter()
            .map(|&(a, b)| FemSystem::assemble(&env, ProblemParams::horizontal(a, b)).unwrap())
            .collect();
        let arch = ConvArch {
            grid: 6,
            channels: 5,
            conv: [3, 3, 3],
            dense: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let actor = Actor::init(arch, -1.0, &mut rng);
        let critic = ValueHead::critic(arch, &mut rng);
        let mut norm = EmaNormalizer::new(arch.obs_dim(), 0.1, 1e-8, 10.0);
        let mut rngs: Vec<_> = (0..4).map(ChaCha8Rng::seed_from_u64).collect();
        let mut collect = |norm: &EmaNormalizer| {
            collect_episodes(
                &actor,
                norm,
                &systems,
                Exploration::Sample,
                &mut rngs,
                &SolveCounter::new(),
            )
            .unwrap()
        };
        let warm = collect(&norm);
        norm.update(
            &warm
                .iter()
                .flat_map(|e| e.raw_observations.concat())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let eps = collect(&norm);
        let batch = TransitionBatch::from_episodes(&eps, &critic, 1.0, 0.95).unwrap();
        Fixture {
            actor,
            critic,
            batch,
        }
    }

    #[test]
    fn ratio_is_one_at_collection_weights() {
        let f = fixture();
        for r in policy_ratios(&f.actor, &f.batch).unwrap() {
            assert_eq!(r, 1.0);
        }
    }

    #[test]
    fn zero_advantages_give_zero_actor_gradient() {
        let mut f = fixture();
        f.batch.advantages.iter_mut().for_each(|a| *a = 0.0);
        let idx: Vec<usize> = (0..f.batch.len()).collect();
        let (loss, g) =
            policy_gradient(&f.actor, &f.batch, &idx, PolicyObjective::Clipped(0.2)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().flatten().all(|&x| x == 0.0));

        let before = f.actor.clone();
        let mut oa = Adam::new(f.actor.params(), AdamConfig::default());
        let mut oc = Adam::new(f.critic.params(), AdamConfig::default());
        let cfg = PpoConfig {
            max_grad_norm: None,
            ..Default::default()
        };
        ppo_update(
            &mut f.actor,
            &mut f.critic,
            &mut oa,
            &mut oc,
            &f.batch,
            &cfg,
            1e-3,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(f.actor, before);
    }

    #[test]
    fn clipped_gradient_equals_reinforce_at_unit_ratio() {
        let f = fixture();
        let idx: Vec<usize> = (0..f.batch.len()).collect();
        let (_, clipped) =
            policy_gradient(&f.actor, &f.batch, &idx, PolicyObjective::Clipped(0.2)).unwrap();
        let (_, reinforce) =
            policy_gradient(&f.actor, &f.batch, &idx, PolicyObjective::Reinforce).unwrap();
        let a: Vec<f64> = clipped.concat();
        let b: Vec<f64> = reinforce.concat();
        assert!(a.iter().any(|x| *x != 0.0));
        assert!(relative_error(&a, &b, 1e-12) < 1e-6);
    }

    #[test]
    fn critic_overfits_a_fixed_batch() {
        let mut f = fixture();
        let mut opt = Adam::new(f.critic.params(), AdamConfig::default());
        let hist = fit_critic(&mut f.critic, &mut opt, &f.batch, 300, 3e-3).unwrap();
        let mut tape = Tape::new();
        let cn = f.critic.params().bind(&mut tape, false);
        let idx: Vec<usize> = (0..f.batch.len()).collect();
        let l = critic_loss(&mut tape, &f.critic, &cn, &f.batch, &idx).unwrap();
        let final_loss = tape.scalar(l);
        assert!(final_loss < 1e-3, "critic loss {} -> {final_loss}", hist[0]);
    }

    #[test]
    fn update_is_seeded_and_moves_weights() {
        let run = || {
            let mut f = fixture();
            let mut oa = Adam::new(f.actor.params(), AdamConfig::default());
            let mut oc = Adam::new(f.critic.params(), AdamConfig::default());
            let cfg = PpoConfig {
                minibatch: 7,
                ..Default::default()
            };
            let s = ppo_update(
                &mut f.actor,
                &mut f.critic,
                &mut oa,
                &mut oc,
                &f.batch,
                &cfg,
                1e-3,
                &mut ChaCha8Rng::seed_from_u64(5),
            )
            .unwrap();
            (f.actor, s)
        };
        let (a1, s1) = run();
        let (a2, s2) = run();
        assert_eq!(a1, a2);
        assert_eq!(s1, s2);
        assert!(s1.minibatch_steps > 0);
        assert_ne!(a1, fixture().actor);
    }

    #[test]
    fn kl_guard_stops_epochs() {
        let mut f = fixture();
        let mut oa = Adam::new(f.actor.params(), AdamConfig::default());
        let mut oc = Adam::new(f.critic.params(), AdamConfig::default());
        let cfg = PpoConfig {
            epochs: 50,
            minibatch: 4,
            target_kl: Some(1e-4),
            ..Default::default()
        };
        let s = ppo_update(
            &mut f.actor,
            &mut f.critic,
            &mut oa,
            &mut oc,
            &f.batch,
            &cfg,
            0.05,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!(s.stopped_early);
        assert!(s.minibatch_steps < 50 * 5);
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(PpoConfig {
            gamma: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PpoConfig {
            clip: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PpoConfig::default().validate().is_ok());
    }
}
