use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::feedback_control;
use super::loss::{episode_loss, HjbLossBreakdown};
use crate::env::{
    sample_params, EnvConfig, EpisodeRecord, FemSystem, ProblemParams, Setup, SolveCounter, State,
};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, LrSchedule};
use crate::value_network::{NetInput, NetShape, ValueNetwork};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HjbConfig {
    /// Weights of the residual, terminal-value and terminal-gradient penalties.
    pub beta: [f64; 3],
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Number of pre-assembled training problems.
    pub pool_size: usize,
    pub iterations: usize,
    pub width: usize,
    pub depth: usize,
    /// Feed the parameters to the network rescaled to [−1, 1].
    pub normalize_params: bool,
    /// Optional global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Stop once this many training PDE solves have been spent.
    pub max_solves: Option<u64>,
    pub seed: u64,
}

impl Default for HjbConfig {
    fn default() -> Self {
        Self {
            beta: [1.0, 1.0, 1.0],
            lr: LrSchedule {
                lr0: 0.075,
                decay: 0.975,
                floor: 0.0025,
            },
            adam: AdamConfig::default(),
            batch_size: 20,
            pool_size: 200,
            iterations: 200,
            width: 64,
            depth: 4,
            normalize_params: false,
            grad_clip: None,
            max_solves: None,
            seed: 0,
        }
    }
}

impl HjbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta.iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::Config("penalty weights must be non-negative".into()));
        }
        if !(self.lr.floor <= self.lr.lr0) {
            return Err(Error::Config(
                "lr floor exceeds initial learning rate".into(),
            ));
        }
        if self.batch_size == 0 || self.batch_size > self.pool_size {
            return Err(Error::Config("batch size must be in 1..=pool_size".into()));
        }
        if self.width == 0 || self.depth == 0 {
            return Err(Error::Config(
                "network width and depth must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Parameter vector as seen by the network.
pub(crate) fn net_params(p: &ProblemParams, normalize: bool) -> Vec<f64> {
    if normalize {
        p.normalized_vec()
    } else {
        p.as_vec()
    }
}

/// Plain (untaped) feedback law `u = −gᵀ∇_zΦ` for one problem.
pub fn feedback_policy<'a>(
    net: &'a ValueNetwork,
    sys: &'a FemSystem,
    y: &'a [f64],
) -> impl FnMut(usize, f64, &State) -> Result<[f64; 2]> + 'a {
    move |_, s, z| {
        let flat = z.to_vec();
        let (_, g) = net.value_and_grad(NetInput { s, z: &flat, y })?;
        let u = feedback_control(sys, s, &flat, &g.dz)?;
        Ok([u[0], u[1]])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationResult {
    pub mean: f64,
    pub per_problem: Vec<f64>,
}

impl ValidationResult {
    pub fn from_objectives(per_problem: Vec<f64>) -> Self {
        let mean = per_problem.iter().sum::<f64>() / per_problem.len().max(1) as f64;
        Self { mean, per_problem }
    }
}

/// Feedback rollouts on fixed problems. Solves are charged to a private
/// counter, so validation never consumes training budget.
pub fn validate(
    net: &ValueNetwork,
    systems: &[FemSystem],
    normalize: bool,
) -> Result<ValidationResult> {
    let counter = SolveCounter::new();
    let objectives = systems
        .par_iter()
        .map(|sys| {
            let y = net_params(&sys.params, normalize);
            sys.rollout(feedback_policy(net, sys, &y), &counter)
                .map(|ep| ep.objective)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ValidationResult::from_objectives(objectives))
}

/// Zero-network rollouts for reference.
pub fn uncontrolled(sys: &FemSystem) -> Result<EpisodeRecord> {
    sys.rollout(|_, _, _| Ok([0.0, 0.0]), &SolveCounter::new())
}

/// Summary of one training iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct HjbIteration {
    pub iter: usize,
    /// Cumulative training PDE solves after this iteration.
    pub solves: u64,
    /// Batch-mean loss terms.
    pub terms: HjbLossBreakdown,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Stateful trainer: problem pool, network, optimizer and solve counter.
pub struct HjbTrainer {
    cfg: HjbConfig,
    pool: Vec<FemSystem>,
    net: ValueNetwork,
    adam: Adam,
    rng: ChaCha8Rng,
    counter: SolveCounter,
    iter: usize,
}

impl HjbTrainer {
    /// Samples and assembles the training pool from `cfg.seed`.
    pub fn new(cfg: HjbConfig, env: &EnvConfig, setup: Setup) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params: Vec<_> = (0..cfg.pool_size)
            .map(|_| sample_params(setup, &mut rng))
            .collect();
        let pool = params
            .into_par_iter()
            .map(|p| FemSystem::assemble(env, p))
            .collect::<Result<Vec<_>>>()?;
        let shape = NetShape {
            width: cfg.width,
            depth: cfg.depth,
            state_dim: env.grid * env.grid + 1,
            param_dim: setup.param_dim(),
        };
        let net = ValueNetwork::init(shape, cfg.seed)?;
        Self::with_network(cfg, pool, net, rng)
    }

    fn with_network(
        cfg: HjbConfig,
        pool: Vec<FemSystem>,
        net: ValueNetwork,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if let Some(sys) = pool.first() {
            if sys.state_dim() != net.shape().state_dim {
                return Err(Error::Config(
                    "network state dimension does not match the grid".into(),
                ));
            }
        }
        let adam = Adam::new(net.params(), cfg.adam);
        Ok(Self {
            cfg,
            pool,
            net,
            adam,
            rng,
            counter: SolveCounter::new(),
            iter: 0,
        })
    }

    /// Trainer over an explicit pool and initial network.
    pub fn from_parts(cfg: HjbConfig, pool: Vec<FemSystem>, net: ValueNetwork) -> Result<Self> {
        if pool.len() < cfg.batch_size {
            return Err(Error::Config("pool smaller than batch".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::with_network(cfg, pool, net, rng)
    }

    pub fn config(&self) -> &HjbConfig {
        &self.cfg
    }

    pub fn network(&self) -> &ValueNetwork {
        &self.net
    }

    pub fn into_network(self) -> ValueNetwork {
        self.net
    }

    pub fn solves(&self) -> u64 {
        self.counter.get()
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    /// True once the iteration or solve budget is exhausted.
    pub fn finished(&self) -> bool {
        self.iter >= self.cfg.iterations || self.cfg.max_solves.is_some_and(|m| self.solves() >= m)
    }

    /// Batch-mean loss and gradient over the given pool members, reduced in
    /// index order.
    pub fn batch_gradient(
        &self,
        members: &[usize],
    ) -> Result<(HjbLossBreakdown, f64, Vec<Vec<f64>>)> {
        let beta = self.cfg.beta;
        let results = members
            .par_iter()
            .map(|&k| {
                let sys = &self.pool[k];
                let y = net_params(&sys.params, self.cfg.normalize_params);
                episode_loss(&self.net, sys, &y, beta, &self.counter, true)
            })
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / members.len() as f64;
        let mut terms = HjbLossBreakdown::default();
        let mut loss = 0.0;
        let mut grads = self.net.params().zero_grads();
        for r in &results {
            terms.add_scaled(&r.terms, scale);
            loss += scale * r.total;
            nn::add_grads(&mut grads, r.grads.as_ref().expect("requested gradients"));
        }
        nn::scale_grads(&mut grads, scale);
        Ok((terms, loss, grads))
    }

    /// One Adam step on a freshly sampled batch.
    pub fn step(&mut self) -> Result<HjbIteration> {
        let members = sample(&mut self.rng, self.pool.len(), self.cfg.batch_size).into_vec();
        let (terms, loss, mut grads) = self.batch_gradient(&members)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iter: self.iter,
                detail: format!("loss {loss}, terms {terms:?}"),
            });
        }
        let grad_norm = match self.cfg.grad_clip {
            Some(c) => nn::clip_grad_norm(&mut grads, c),
            None => nn::grad_norm(&grads),
        };
        let lr = self.cfg.lr.at(self.iter);
        self.adam
            .step(self.net.params_mut(), &grads, lr)
            .map_err(|e| Error::Diverged {
                iter: self.iter,
                detail: e.to_string(),
            })?;
        self.iter += 1;
        Ok(HjbIteration {
            iter: self.iter,
            solves: self.solves(),
            terms,
            loss,
            lr,
            grad_norm,
        })
    }
}

impl std::fmt::Debug for HjbTrainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HjbTrainer")
            .field("iter", &self.iter)
            .field("solves", &self.solves())
            .field("pool", &self.pool.len())
            .finish()
    }
}
