//! Parameterized advection-diffusion control environment.
//!
//! State `z = (a, α)`: nodal concentration on an `n × n` P1 grid plus the
//! sink height. One control step with `u = (u₁, u₂)`:
//!
//! ```text
//! α' = clamp(α + u₂Δs, 0, 1)
//! (M + Δs(K + C)) a' = M a + Δs(φ + u₁ q(α'))
//! ```
//!
//! Objective: `J = Σ_{i<N} ½|uᵢ|²Δs + ρ Σ_{x₁>0.75} max(a_N, 0) h²`.

mod fem;
mod grid;
pub mod io;
mod params;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use fem::{
    advection_matrix, box_load, inflow_matrix, laplace_integral, laplace_integral_dc, mass_matrix,
    stiffness_matrix, FemMatrices, SinkOp, SinkProfile,
};
pub use grid::Grid;
pub use params::{
    sample_params, validation_set, ProblemParams, Setup, PHASE_RANGE, SOURCE_X1_RANGE,
    SOURCE_X2_RANGE, VALIDATION_PHASE, VALIDATION_X1, VALIDATION_X2,
};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Physical and discretization constants of the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Nodes per side.
    pub grid: usize,
    pub kappa: f64,
    /// Source magnitude `c`.
    pub source_magnitude: f64,
    /// Source width `σ_s`.
    pub source_width: f64,
    pub rho: f64,
    pub steps: usize,
    pub dt: f64,
    pub alpha0: f64,
    pub sink_amplitude: f64,
    pub sink_x1: f64,
    pub sink_width_x1: f64,
    pub sink_width_x2: f64,
    pub target_x1: f64,
    /// Weakly impose zero concentration on inflow edges.
    pub clean_inflow: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::for_setup(Setup::Horizontal)
    }
}

impl EnvConfig {
    /// Default constants for each setup. The sinusoidal family reuses the
    /// horizontal diffusivity.
    pub fn for_setup(setup: Setup) -> Self {
        let (c, sigma) = match setup {
            Setup::Horizontal => (5.0, 0.01),
            Setup::Sinusoidal => (0.5, 0.025),
        };
        Self {
            grid: 32,
            kappa: 0.008,
            source_magnitude: c,
            source_width: sigma,
            rho: 40.0,
            steps: 25,
            dt: 0.02,
            alpha0: 0.5,
            sink_amplitude: 25.0,
            sink_x1: 0.6,
            sink_width_x1: 0.025,
            sink_width_x2: 0.15,
            target_x1: 0.75,
            clean_inflow: true,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("kappa", self.kappa),
            ("source_width", self.source_width),
            ("dt", self.dt),
            ("sink_width_x1", self.sink_width_x1),
            ("sink_width_x2", self.sink_width_x2),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.grid < 4 {
            return Err(Error::Config("grid needs at least 4 nodes per side".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha0) {
            return Err(Error::Config("alpha0 must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Shared count of implicit-step linear solves.
#[derive(Clone, Debug, Default)]
pub struct SolveCounter(Arc<AtomicU64>);

impl SolveCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    pub fn add(&self, k: u64) {
        self.0.fetch_add(k, Ordering::SeqCst);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub a: Vec<f64>,
    pub alpha: f64,
}

impl State {
    /// `z = (a, α)` as one vector.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.a.len() + 1);
        z.extend_from_slice(&self.a);
        z.push(self.alpha);
        z
    }
}

/// Everything needed to simulate one problem instance.
#[derive(Clone, Debug)]
pub struct FemSystem {
    pub config: EnvConfig,
    pub params: ProblemParams,
    pub grid: Grid,
    pub matrices: FemMatrices,
    /// Source load vector φ.
    pub source: Arc<Vec<f64>>,
    pub sink: Arc<SinkProfile>,
    pub target_mask: Arc<Vec<bool>>,
}

impl FemSystem {
    pub fn assemble(config: &EnvConfig, params: ProblemParams) -> Result<Self> {
        config.validate()?;
        let grid = Grid::new(config.grid);
        let matrices =
            FemMatrices::assemble(&grid, &params, config.kappa, config.dt, config.clean_inflow)?;
        let (c, s) = (config.source_magnitude, config.source_width);
        let source = box_load(&grid, c / s, (params.source_x1, params.source_x2), (s, s));
        let sink = SinkProfile::new(
            &grid,
            config.sink_amplitude,
            config.sink_x1,
            config.sink_width_x1,
            config.sink_width_x2,
        );
        Ok(Self {
            config: config.clone(),
            params,
            grid,
            matrices,
            source: Arc::new(source),
            sink: Arc::new(sink),
            target_mask: Arc::new(grid.mask_x1_above(config.target_x1)),
        })
    }

    /// Concentration dimension `n²`.
    pub fn n_nodes(&self) -> usize {
        self.grid.nodes()
    }

    /// Full state dimension `n² + 1`.
    pub fn state_dim(&self) -> usize {
        self.grid.nodes() + 1
    }

    pub fn initial_state(&self) -> State {
        State {
            a: vec![0.0; self.n_nodes()],
            alpha: self.config.alpha0,
        }
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.config.dt
    }

    /// One implicit-Euler step; counts one solve.
    pub fn step(&self, z: &State, u: [f64; 2], counter: &SolveCounter) -> Result<State> {
        if !(u[0].is_finite() && u[1].is_finite()) {
            return Err(Error::NonFinite {
                op: "env_step",
                node: 0,
            });
        }
        let dt = self.config.dt;
        let alpha = (z.alpha + u[1] * dt).clamp(0.0, 1.0);
        let q = self.sink.load(alpha);
        let mut rhs = self.matrices.mass.matvec(&z.a)?;
        for ((r, f), qk) in rhs.iter_mut().zip(self.source.iter()).zip(&q) {
            *r += dt * (f + u[0] * qk);
        }
        self.matrices.implicit.solve_in_place(&mut rhs)?;
        counter.add(1);
        Ok(State { a: rhs, alpha })
    }

    pub fn running_cost(&self, u: [f64; 2]) -> f64 {
        0.5 * (u[0] * u[0] + u[1] * u[1]) * self.config.dt
    }

    pub fn terminal_cost(&self, a: &[f64]) -> f64 {
        let h = self.grid.spacing();
        let s: f64 = a
            .iter()
            .zip(self.target_mask.iter())
            .filter(|(_, &m)| m)
            .map(|(v, _)| v.max(0.0))
            .sum();
        self.config.rho * s * h * h
    }

    /// ∇_a G = ρh²·1_targ·1_{a>0}.
    pub fn terminal_cost_grad(&self, a: &[f64]) -> Vec<f64> {
        let w = self.config.rho * self.grid.spacing().powi(2);
        a.iter()
            .zip(self.target_mask.iter())
            .map(|(&v, &m)| if m && v > 0.0 { w } else { 0.0 })
            .collect()
    }

    /// `1ᵀM a`.
    pub fn total_mass(&self, a: &[f64]) -> f64 {
        crate::autodiff::tensor::dot(&self.matrices.lumped_mass, a)
    }

    /// Closed-loop episode from the reset state; the policy sees `(i, sᵢ, zᵢ)`.
    pub fn rollout<P>(&self, mut policy: P, counter: &SolveCounter) -> Result<EpisodeRecord>
    where
        P: FnMut(usize, f64, &State) -> Result<[f64; 2]>,
    {
        let n_steps = self.config.steps;
        let mut rec = EpisodeRecord::with_capacity(n_steps, self.config.dt);
        let mut z = self.initial_state();
        for i in 0..n_steps {
            let s = self.time(i);
            let u = policy(i, s, &z)?;
            let next = self.step(&z, u, counter)?;
            rec.push_step(s, z, u, self.running_cost(u));
            z = next;
        }
        let g = self.terminal_cost(&z.a);
        rec.finish(self.time(n_steps), z, g);
        Ok(rec)
    }

    /// Open-loop episode with a fixed control sequence.
    pub fn rollout_open_loop(
        &self,
        controls: &[[f64; 2]],
        counter: &SolveCounter,
    ) -> Result<EpisodeRecord> {
        if controls.len() != self.config.steps {
            return Err(crate::error::shape_err(
                "rollout_open_loop",
                format!(
                    "{} controls for {} steps",
                    controls.len(),
                    self.config.steps
                ),
            ));
        }
        self.rollout(|i, _, _| Ok(controls[i]), counter)
    }

    /// Binds the dynamics to a tape.
    pub fn bind(&self, tape: &mut Tape) -> TapeDynamics {
        TapeDynamics {
            sys: self.clone(),
            source: tape.constant(Tensor::vector(self.source.as_ref().clone())),
            sink_op: Arc::new(SinkOp(self.sink.clone())),
        }
    }
}

/// Differentiable version of [`FemSystem::step`] and the costs.
#[derive(Clone)]
pub struct TapeDynamics {
    pub sys: FemSystem,
    pub source: NodeId,
    sink_op: Arc<SinkOp>,
}

/// Tape nodes for a state.
#[derive(Clone, Copy, Debug)]
pub struct TapeState {
    pub a: NodeId,
    pub alpha: NodeId,
}

impl TapeDynamics {
    pub fn initial_state(&self, tape: &mut Tape) -> TapeState {
        let z = self.sys.initial_state();
        TapeState {
            a: tape.constant(Tensor::vector(z.a)),
            alpha: tape.constant(Tensor::vector(vec![z.alpha])),
        }
    }

    pub fn state_value(&self, tape: &Tape, z: TapeState) -> State {
        State {
            a: tape.value(z.a).data().to_vec(),
            alpha: tape.value(z.alpha).data()[0],
        }
    }

    /// `q(α)` for an α node of shape `[1]`.
    pub fn sink_load(&self, tape: &mut Tape, alpha: NodeId) -> NodeId {
        let q = self.sys.sink.load(tape.value(alpha).data()[0]);
        tape.custom(self.sink_op.clone(), &[alpha], Tensor::vector(q))
    }

    /// Returns the next state and `q(α')`.
    pub fn step(
        &self,
        tape: &mut Tape,
        z: TapeState,
        u1: NodeId,
        u2: NodeId,
        counter: &SolveCounter,
    ) -> Result<(TapeState, NodeId)> {
        let dt = self.sys.config.dt;
        let du = tape.scale(u2, dt);
        let moved = tape.add(z.alpha, du)?;
        let alpha = tape.clamp(moved, 0.0, 1.0);
        let q = self.sink_load(tape, alpha);
        let uq = tape.scalar_mul(u1, q)?;
        let forcing = tape.add(self.source, uq)?;
        let forcing = tape.scale(forcing, dt);
        let ma = tape.sparse_matvec(&self.sys.matrices.mass, z.a)?;
        let rhs = tape.add(ma, forcing)?;
        let a = tape.solve(&self.sys.matrices.implicit, rhs)?;
        counter.add(1);
        Ok((TapeState { a, alpha }, q))
    }

    /// `½|u|²Δs`.
    pub fn running_cost(&self, tape: &mut Tape, u1: NodeId, u2: NodeId) -> Result<NodeId> {
        let u = tape.concat(&[u1, u2]);
        let sq = tape.square(u);
        let s = tape.sum(sq);
        Ok(tape.scale(s, 0.5 * self.sys.config.dt))
    }

    /// `ρh² Σ_targ max(a, 0)`.
    pub fn terminal_cost(&self, tape: &mut Tape, a: NodeId) -> Result<NodeId> {
        let w = self.sys.config.rho * self.sys.grid.spacing().powi(2);
        let mask: Vec<f64> = self
            .sys
            .target_mask
            .iter()
            .map(|&m| if m { w } else { 0.0 })
            .collect();
        let mask = tape.constant(Tensor::vector(mask));
        let pos = tape.relu(a);
        tape.dot(pos, mask)
    }
}

/// Trajectory and cost bookkeeping for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub dt: f64,
    /// s₀..s_N.
    pub times: Vec<f64>,
    /// z₀..z_N.
    pub states: Vec<State>,
    /// u₀..u_{N−1}.
    pub controls: Vec<[f64; 2]>,
    /// r₀..r_N; rᵢ is the running cost for i < N and r_N = G.
    pub rewards: Vec<f64>,
    pub running_cost: f64,
    pub terminal_cost: f64,
    pub objective: f64,
}

impl EpisodeRecord {
    pub fn with_capacity(steps: usize, dt: f64) -> Self {
        Self {
            dt,
            times: Vec::with_capacity(steps + 1),
            states: Vec::with_capacity(steps + 1),
            controls: Vec::with_capacity(steps),
            rewards: Vec::with_capacity(steps + 1),
            running_cost: 0.0,
            terminal_cost: 0.0,
            objective: 0.0,
        }
    }

    pub fn push_step(&mut self, s: f64, z: State, u: [f64; 2], cost: f64) {
        self.times.push(s);
        self.states.push(z);
        self.controls.push(u);
        self.rewards.push(cost);
        self.running_cost += cost;
    }

    pub fn finish(&mut self, s: f64, z: State, terminal: f64) {
        self.times.push(s);
        self.states.push(z);
        self.rewards.push(terminal);
        self.terminal_cost = terminal;
        self.objective = self.running_cost + terminal;
    }

    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn final_state(&self) -> &State {
        self.states.last().expect("finished episode")
    }

    /// Objective recomputed from the stored controls and terminal cost.
    pub fn recompute_objective(&self) -> f64 {
        let running: f64 = self
            .controls
            .iter()
            .map(|u| 0.5 * (u[0] * u[0] + u[1] * u[1]) * self.dt)
            .sum();
        running + self.terminal_cost
    }
}

#[cfg(test)]
mod tests;
