use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nets::{Actor, ConvArch, ValueHead};
use super::obs::{channel_count, observe, EmaNormalizer};
use super::ppo::{ppo_update, PpoConfig};
use super::rollout::{collect_episodes, EpisodeData, Exploration, TransitionBatch};
use super::td3::{td3_update, ReplayBuffer, Td3Agent, Td3Config};
use crate::env::{sample_params, EnvConfig, FemSystem, Setup, SolveCounter, State};
use crate::error::{Error, Result};
use crate::hjb::ValidationResult;
use crate::nn::{read_checkpoint, write_checkpoint};
use crate::nn::{Adam, AdamConfig, LrSchedule};

/// Settings shared by both actor-critic learners plus their own sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub conv_channels: [usize; 3],
    pub dense_width: usize,
    /// Per-network learning rate, decayed once per collection round.
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    /// Environments collected per round.
    pub envs: usize,
    /// Initial log-variance of the Gaussian policy.
    pub init_log_var: f64,
    pub obs_ema_rate: f64,
    pub obs_clip: f64,
    pub ppo: PpoConfig,
    pub td3: Td3Config,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            conv_channels: [8, 16, 16],
            dense_width: 64,
            lr: LrSchedule {
                lr0: 1e-4,
                decay: 0.995,
                floor: 1e-5,
            },
            adam: AdamConfig::default(),
            envs: 8,
            init_log_var: -2.0,
            obs_ema_rate: 0.05,
            obs_clip: 10.0,
            ppo: PpoConfig::default(),
            td3: Td3Config::default(),
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.envs == 0 || self.dense_width == 0 || self.conv_channels.contains(&0) {
            return Err(Error::Config(
                "environment count and layer widths must be positive".into(),
            ));
        }
        if !(self.lr.floor <= self.lr.lr0) || !(self.lr.lr0 > 0.0) {
            return Err(Error::Config(
                "learning rate must be positive with floor ≤ initial".into(),
            ));
        }
        if !(self.obs_ema_rate > 0.0 && self.obs_ema_rate <= 1.0) || !(self.obs_clip > 0.0) {
            return Err(Error::Config(
                "observation EMA rate must lie in (0, 1] and clip be positive".into(),
            ));
        }
        self.ppo.validate()?;
        self.td3.validate()
    }

    pub fn arch(&self, env: &EnvConfig, setup: Setup) -> ConvArch {
        ConvArch {
            grid: env.grid,
            channels: channel_count(setup),
            conv: self.conv_channels,
            dense: self.dense_width,
        }
    }

    fn normalizer(&self, arch: ConvArch) -> EmaNormalizer {
        EmaNormalizer::new(arch.obs_dim(), self.obs_ema_rate, 1e-8, self.obs_clip)
    }
}

/// Summary of one collection-and-update round.
#[derive(Clone, Debug, PartialEq)]
pub struct RlRound {
    pub iter: usize,
    /// Cumulative training PDE solves.
    pub solves: u64,
    /// Mean objective of the episodes collected this round.
    pub episode_objective: f64,
    pub lr: f64,
    pub losses: Vec<(&'static str, f64)>,
}

fn sample_systems(
    env: &EnvConfig,
    setup: Setup,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<FemSystem>, Vec<ChaCha8Rng>)> {
    let mut systems = Vec::with_capacity(count);
    let mut rngs = Vec::with_capacity(count);
    for _ in 0..count {
        systems.push(FemSystem::assemble(env, sample_params(setup, rng))?);
        rngs.push(ChaCha8Rng::seed_from_u64(rng.random()));
    }
    Ok((systems, rngs))
}

fn mean_objective(eps: &[EpisodeData]) -> f64 {
    eps.iter().map(|e| e.record.objective).sum::<f64>() / eps.len() as f64
}

fn fold_observations(norm: &mut EmaNormalizer, eps: &[EpisodeData]) -> Result<()> {
    let raw: Vec<f64> = eps
        .iter()
        .flat_map(|e| e.raw_observations.concat())
        .collect();
    norm.update(&raw)
}

/// Deterministic (mean-action) rollouts on fixed problems with frozen
/// normalizer statistics. Solves go to a private counter.
pub fn validate_policy(
    actor: &Actor,
    normalizer: &EmaNormalizer,
    systems: &[FemSystem],
) -> Result<ValidationResult> {
    let mut rngs: Vec<ChaCha8Rng> = (0..systems.len() as u64)
        .map(ChaCha8Rng::seed_from_u64)
        .collect();
    let eps = collect_episodes(
        actor,
        normalizer,
        systems,
        Exploration::Mean,
        &mut rngs,
        &SolveCounter::new(),
    )?;
    if eps.len() != systems.len() {
        return Err(Error::Diverged {
            iter: 0,
            detail: "validation episode failed".into(),
        });
    }
    Ok(ValidationResult::from_objectives(
        eps.iter().map(|e| e.record.objective).collect(),
    ))
}

/// Mean-action feedback policy for [`FemSystem::rollout`].
pub fn actor_policy<'a>(
    actor: &'a Actor,
    normalizer: &'a EmaNormalizer,
    sys: &'a FemSystem,
) -> impl FnMut(usize, f64, &State) -> Result<[f64; 2]> + 'a {
    let y = sys.params.as_vec();
    move |_, s, z| {
        let obs = normalizer.normalize(&observe(s, z, &y, sys.config.grid));
        Ok(actor.distribution(&obs)?.0[0])
    }
}

/// Writes the actor weights with the normalizer statistics in the metadata.
pub fn save_policy(
    path: &Path,
    method: &str,
    actor: &Actor,
    normalizer: &EmaNormalizer,
) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "actor",
        "method": method,
        "arch": actor.arch(),
        "normalizer": normalizer,
    });
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, &meta, actor.params())?;
    w.flush()?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<(Actor, EmaNormalizer)> {
    let ck = read_checkpoint(&mut BufReader::new(File::open(path)?))?;
    if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("actor") {
        return Err(Error::Format("checkpoint does not hold an actor".into()));
    }
    let field = |k: &str| {
        ck.meta
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Format(format!("missing {k} in checkpoint")))
    };
    let arch: ConvArch =
        serde_json::from_value(field("arch")?).map_err(|e| Error::Format(e.to_string()))?;
    let norm: EmaNormalizer =
        serde_json::from_value(field("normalizer")?).map_err(|e| Error::Format(e.to_string()))?;
    if norm.dim() != arch.obs_dim() {
        return Err(Error::Format(
            "normalizer does not match the actor input".into(),
        ));
    }
    Ok((Actor::from_params(arch, ck.params)?, norm))
}

/// On-policy learner: each round collects `envs` fresh episodes with the
/// current Gaussian policy and runs one PPO update on them.
pub struct PpoTrainer {
    cfg: RlConfig,
    env: EnvConfig,
    setup: Setup,
    actor: Actor,
    critic: ValueHead,
    actor_opt: Adam,
    critic_opt: Adam,
    normalizer: EmaNormalizer,
    rng: ChaCha8Rng,
    counter: SolveCounter,
    round: usize,
}

impl PpoTrainer {
    pub fn new(cfg: RlConfig, env: &EnvConfig, setup: Setup) -> Result<Self> {
        cfg.validate()?;
        env.validate()?;
        let arch = cfg.arch(env, setup);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let actor = Actor::init(arch, cfg.init_log_var, &mut rng);
        let critic = ValueHead::critic(arch, &mut rng);
        Ok(Self {
            actor_opt: Adam::new(actor.params(), cfg.adam),
            critic_opt: Adam::new(critic.params(), cfg.adam),
            normalizer: cfg.normalizer(arch),
            env: env.clone(),
            setup,
            actor,
            critic,
            rng,
            counter: SolveCounter::new(),
            round: 0,
            cfg,
        })
    }

    pub fn actor(&self) -> &Actor {
        &self.actor
    }

    pub fn critic(&self) -> &ValueHead {
        &self.critic
    }

    pub fn normalizer(&self) -> &EmaNormalizer {
        &self.normalizer
    }

    pub fn solves(&self) -> u64 {
        self.counter.get()
    }

    pub fn rounds(&self) -> usize {
        self.round
    }

    pub fn step(&mut self) -> Result<RlRound> {
        let lr = self.cfg.lr.at(self.round);
        let (systems, mut rngs) =
            sample_systems(&self.env, self.setup, self.cfg.envs, &mut self.rng)?;
        let eps = collect_episodes(
            &self.actor,
            &self.normalizer,
            &systems,
            Exploration::Sample,
            &mut rngs,
            &self.counter,
        )?;
        let p = &self.cfg.ppo;
        let batch = TransitionBatch::from_episodes(&eps, &self.critic, p.gamma, p.gae_lambda)?;
        let stats = ppo_update(
            &mut self.actor,
            &mut self.critic,
            &mut self.actor_opt,
            &mut self.critic_opt,
            &batch,
            p,
            lr,
            &mut self.rng,
        )
        .map_err(|e| with_iter(e, self.round))?;
        fold_observations(&mut self.normalizer, &eps)?;
        self.round += 1;
        Ok(RlRound {
            iter: self.round,
            solves: self.solves(),
            episode_objective: mean_objective(&eps),
            lr,
            losses: vec![
                ("policy_loss", stats.policy_loss),
                ("value_loss", stats.value_loss),
                ("approx_kl", stats.approx_kl),
                ("clip_fraction", stats.clip_fraction),
            ],
        })
    }

    pub fn validate(&self, systems: &[FemSystem]) -> Result<ValidationResult> {
        validate_policy(&self.actor, &self.normalizer, systems)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_policy(path, "ppo", &self.actor, &self.normalizer)
    }
}

fn with_iter(e: Error, iter: usize) -> Error {
    match e {
        Error::Diverged { detail, .. } => Error::Diverged { iter, detail },
        other => other,
    }
}

/// Off-policy learner: each round collects `envs` episodes with noisy mean
/// actions into a replay buffer, then runs `updates_per_transition` TD3
/// updates per new transition once the buffer is past warmup.
pub struct Td3Trainer {
    cfg: RlConfig,
    env: EnvConfig,
    setup: Setup,
    agent: Td3Agent,
    normalizer: EmaNormalizer,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    counter: SolveCounter,
    round: usize,
}

impl Td3Trainer {
    pub fn new(cfg: RlConfig, env: &EnvConfig, setup: Setup) -> Result<Self> {
        cfg.validate()?;
        env.validate()?;
        let arch = cfg.arch(env, setup);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let agent = Td3Agent::init(arch, cfg.adam, &mut rng);
        Ok(Self {
            normalizer: cfg.normalizer(arch),
            buffer: ReplayBuffer::new(cfg.td3.replay_capacity, arch.obs_dim()),
            env: env.clone(),
            setup,
            agent,
            rng,
            counter: SolveCounter::new(),
            round: 0,
            cfg,
        })
    }

    pub fn agent(&self) -> &Td3Agent {
        &self.agent
    }

    pub fn normalizer(&self) -> &EmaNormalizer {
        &self.normalizer
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn solves(&self) -> u64 {
        self.counter.get()
    }

    pub fn rounds(&self) -> usize {
        self.round
    }

    pub fn step(&mut self) -> Result<RlRound> {
        let lr = self.cfg.lr.at(self.round);
        let t = self.cfg.td3;
        let (systems, mut rngs) =
            sample_systems(&self.env, self.setup, self.cfg.envs, &mut self.rng)?;
        let explore = Exploration::MeanPlusNoise {
            std: t.explore_std,
            limit: t.action_limit,
        };
        let eps = collect_episodes(
            &self.agent.actor,
            &self.normalizer,
            &systems,
            explore,
            &mut rngs,
            &self.counter,
        )?;
        let mut fresh = 0;
        for ep in &eps {
            self.buffer.push_episode(ep);
            fresh += ep.record.steps();
        }
        fold_observations(&mut self.normalizer, &eps)?;

        let (mut critic_loss, mut actor_loss, mut actor_steps, mut updates) =
            (0.0, 0.0, 0usize, 0usize);
        if self.buffer.len() >= t.warmup {
            let n = (t.updates_per_transition * fresh as f64).round() as usize;
            for _ in 0..n {
                let s = td3_update(&mut self.agent, &self.buffer, &t, lr, &mut self.rng)
                    .map_err(|e| with_iter(e, self.round))?;
                critic_loss += s.critic_loss;
                if let Some(a) = s.actor_loss {
                    actor_loss += a;
                    actor_steps += 1;
                }
                updates += 1;
            }
        }
        self.round += 1;
        Ok(RlRound {
            iter: self.round,
            solves: self.solves(),
            episode_objective: mean_objective(&eps),
            lr,
            losses: vec![
                ("critic_loss", critic_loss / updates.max(1) as f64),
                ("actor_loss", actor_loss / actor_steps.max(1) as f64),
            ],
        })
    }

    pub fn validate(&self, systems: &[FemSystem]) -> Result<ValidationResult> {
        validate_policy(&self.agent.actor, &self.normalizer, systems)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_policy(path, "td3", &self.agent.actor, &self.normalizer)
    }
}
