use crate::autodiff::{NodeId, Tape, Tensor};
use crate::env::{EpisodeRecord, FemSystem, SolveCounter, State};
use crate::error::{Error, Result};
use crate::value_network::ValueNetwork;

/// Per-episode loss terms (unweighted penalties).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HjbLossBreakdown {
    /// Realized control objective J.
    pub objective: f64,
    /// `Σᵢ |HJB residual(sᵢ, zᵢ)|·Δs` over i = 0..N−1.
    pub residual: f64,
    /// `|G(z_N) − Φ(T, z_N)|`.
    pub terminal_value: f64,
    /// `‖∇_zG(z_N) − ∇_zΦ(T, z_N)‖₁`.
    pub terminal_grad: f64,
}

impl HjbLossBreakdown {
    pub fn total(&self, beta: [f64; 3]) -> f64 {
        self.objective
            + beta[0] * self.residual
            + beta[1] * self.terminal_value
            + beta[2] * self.terminal_grad
    }

    pub fn add_scaled(&mut self, other: &Self, c: f64) {
        self.objective += c * other.objective;
        self.residual += c * other.residual;
        self.terminal_value += c * other.terminal_value;
        self.terminal_grad += c * other.terminal_grad;
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeLoss {
    pub terms: HjbLossBreakdown,
    pub total: f64,
    /// Weight gradients of `total`, in parameter-set order.
    pub grads: Option<Vec<Vec<f64>>>,
    pub episode: EpisodeRecord,
}

/// Feedback rollout of `net` on `sys` recorded on a tape, returning
/// `J + β₁·residual + β₂·terminal_value + β₃·terminal_grad` and, when
/// `with_grads`, its gradient in the network weights.
///
/// Each step evaluates Φ and ∇Φ at `(sᵢ, zᵢ, y)`, forms
/// `w = M⁻¹∇_aΦ`, `u = (−q(αᵢ)·w, −∂_αΦ)` and the residual
/// `∂_sΦ + w·(φ − (K+C)a) − ½|u|²`, then advances the implicit step.
pub fn episode_loss(
    net: &ValueNetwork,
    sys: &FemSystem,
    y: &[f64],
    beta: [f64; 3],
    counter: &SolveCounter,
    with_grads: bool,
) -> Result<EpisodeLoss> {
    let n = sys.n_nodes();
    let dt = sys.config.dt;
    let steps = sys.config.steps;
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, with_grads);
    let dynamics = sys.bind(&mut tape);
    let mut z = dynamics.initial_state(&mut tape);
    let mut q = dynamics.sink_load(&mut tape, z.alpha);

    let mut episode = EpisodeRecord::with_capacity(steps, dt);
    let mut running = Vec::with_capacity(steps);
    let mut residuals = Vec::with_capacity(steps);
    for i in 0..steps {
        let s = sys.time(i);
        let zn = tape.concat(&[z.a, z.alpha]);
        let ev = bound.eval_parts(&mut tape, s, zn, y)?;
        let grad_a = tape.slice(ev.dz, 0, n)?;
        let grad_alpha = tape.slice(ev.dz, n, 1)?;
        let w = tape.solve(&sys.matrices.mass_lu, grad_a)?;
        let qw = tape.dot(q, w)?;
        let u1 = tape.neg(qw);
        let u2 = tape.neg(grad_alpha);

        let transport = tape.sparse_matvec(&sys.matrices.operator, z.a)?;
        let drift = tape.sub(dynamics.source, transport)?;
        let advect = tape.dot(w, drift)?;
        let cost = dynamics.running_cost(&mut tape, u1, u2)?;
        // ½|u|² = cost / Δs
        let half_u2 = tape.scale(cost, 1.0 / dt);
        let r = tape.add(ev.ds, advect)?;
        let r = tape.sub(r, half_u2)?;
        residuals.push(tape.abs(r));
        running.push(cost);

        let state = dynamics.state_value(&tape, z);
        let u = [tape.value(u1).data()[0], tape.value(u2).data()[0]];
        let (next, q_next) = dynamics.step(&mut tape, z, u1, u2, counter)?;
        episode.push_step(s, state, u, tape.scalar(cost));
        z = next;
        q = q_next;
    }

    let terminal = dynamics.terminal_cost(&mut tape, z.a)?;
    let final_state: State = dynamics.state_value(&tape, z);
    let zn = tape.concat(&[z.a, z.alpha]);
    let ev = bound.eval_parts(&mut tape, sys.time(steps), zn, y)?;
    let value_gap = tape.sub(terminal, ev.value)?;
    let terminal_value = tape.abs(value_gap);
    let mut target = sys.terminal_cost_grad(&final_state.a);
    target.push(0.0);
    let target = tape.constant(Tensor::vector(target));
    let grad_gap = tape.sub(ev.dz, target)?;
    let grad_gap = tape.abs(grad_gap);
    let terminal_grad = tape.sum(grad_gap);

    let running_all = tape.concat(&running);
    let running_sum = tape.sum(running_all);
    let objective = tape.add(running_sum, terminal)?;
    let residual_all = tape.concat(&residuals);
    let residual_sum = tape.sum(residual_all);
    let residual = tape.scale(residual_sum, dt);

    let terms = HjbLossBreakdown {
        objective: tape.scalar(objective),
        residual: tape.scalar(residual),
        terminal_value: tape.scalar(terminal_value),
        terminal_grad: tape.scalar(terminal_grad),
    };
    episode.finish(sys.time(steps), final_state, tape.scalar(terminal));

    let weighted: Vec<NodeId> = vec![
        objective,
        tape.scale(residual, beta[0]),
        tape.scale(terminal_value, beta[1]),
        tape.scale(terminal_grad, beta[2]),
    ];
    let stacked = tape.concat(&weighted);
    let total = tape.sum(stacked);
    let total_value = tape.scalar(total);
    if !total_value.is_finite() {
        return Err(Error::Diverged {
            iter: 0,
            detail: format!("non-finite episode loss, terms {terms:?}"),
        });
    }
    let grads = if with_grads {
        let g = tape.backward(total)?;
        Some(net.params().collect_grads(&g, bound.param_nodes()))
    } else {
        None
    };
    Ok(EpisodeLoss {
        terms,
        total: total_value,
        grads,
        episode,
    })
}
