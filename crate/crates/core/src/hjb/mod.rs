//! Model-based training of the value network with HJB penalties.
//!
//! For control-affine dynamics `ż = f(s, z) + g(s, z)u` with running cost
//! `½|u|²`, the Hamiltonian `H(p) = sup_u p·(f + gu) − ½|u|² = p·f + ½|gᵀp|²`
//! is attained at `u = gᵀp`. With `p = −∇_zΦ` this gives the feedback law
//! `u = −gᵀ∇_zΦ`, and the value function satisfies
//!
//! ```text
//! ∂_sΦ + ∇_zΦ·f − ½|gᵀ∇_zΦ|² = 0,   Φ(T, z) = G(z).
//! ```
//!
//! Training rolls the feedback law out through the simulator on a tape and
//! minimizes the realized objective plus penalties on this residual and on
//! the terminal condition.

mod loss;
mod train;

pub use loss::{episode_loss, EpisodeLoss, HjbLossBreakdown};
pub use train::{
    feedback_policy, uncontrolled, validate, HjbConfig, HjbIteration, HjbTrainer, ValidationResult,
};

use crate::autodiff::tensor::dot;
use crate::env::FemSystem;
use crate::error::{shape_err, Result};

/// Dynamics of the form `ż = f(s, z) + g(s, z)u`.
pub trait ControlAffine {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    /// Drift `f(s, z)`.
    fn drift(&self, s: f64, z: &[f64]) -> Result<Vec<f64>>;
    /// `g(s, z)ᵀ p`.
    fn gain_transpose(&self, s: f64, z: &[f64], p: &[f64]) -> Result<Vec<f64>>;
    /// `g(s, z) u`.
    fn gain_apply(&self, s: f64, z: &[f64], u: &[f64]) -> Result<Vec<f64>>;
}

fn check_len(op: &'static str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(shape_err(op, format!("length {} (expected {n})", v.len())));
    }
    Ok(())
}

/// Maximizer of the Hamiltonian at `p = −∇_zΦ`: `u = −gᵀ∇_zΦ`.
pub fn feedback_control<S: ControlAffine + ?Sized>(
    sys: &S,
    s: f64,
    z: &[f64],
    grad_z: &[f64],
) -> Result<Vec<f64>> {
    check_len("feedback_control", grad_z, sys.state_dim())?;
    Ok(sys
        .gain_transpose(s, z, grad_z)?
        .into_iter()
        .map(|v| -v)
        .collect())
}

/// `p·(f + gu) − ½|u|²` for a given control.
pub fn hamiltonian_at<S: ControlAffine + ?Sized>(
    sys: &S,
    s: f64,
    z: &[f64],
    p: &[f64],
    u: &[f64],
) -> Result<f64> {
    check_len("hamiltonian", p, sys.state_dim())?;
    let f = sys.drift(s, z)?;
    let gu = sys.gain_apply(s, z, u)?;
    let motion: f64 = p
        .iter()
        .zip(f.iter().zip(&gu))
        .map(|(p, (f, g))| p * (f + g))
        .sum();
    Ok(motion - 0.5 * dot(u, u))
}

/// `H(p) = p·f + ½|gᵀp|²`.
pub fn hamiltonian<S: ControlAffine + ?Sized>(
    sys: &S,
    s: f64,
    z: &[f64],
    p: &[f64],
) -> Result<f64> {
    check_len("hamiltonian", p, sys.state_dim())?;
    let f = sys.drift(s, z)?;
    let gp = sys.gain_transpose(s, z, p)?;
    Ok(dot(p, &f) + 0.5 * dot(&gp, &gp))
}

/// HJB residual `∂_sΦ + ∇_zΦ·f − ½|gᵀ∇_zΦ|²`, zero for the exact value function.
pub fn hjb_residual<S: ControlAffine + ?Sized>(
    sys: &S,
    s: f64,
    z: &[f64],
    ds: f64,
    grad_z: &[f64],
) -> Result<f64> {
    check_len("hjb_residual", grad_z, sys.state_dim())?;
    let f = sys.drift(s, z)?;
    let gp = sys.gain_transpose(s, z, grad_z)?;
    Ok(ds + dot(grad_z, &f) - 0.5 * dot(&gp, &gp))
}

/// Semi-discrete advection-diffusion dynamics with `z = (a, α)`:
/// `ȧ = M⁻¹(φ − (K + C)a) + u₁M⁻¹q(α)`, `α̇ = u₂`.
impl ControlAffine for FemSystem {
    fn state_dim(&self) -> usize {
        self.n_nodes() + 1
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn drift(&self, _s: f64, z: &[f64]) -> Result<Vec<f64>> {
        check_len("drift", z, self.state_dim())?;
        let n = self.n_nodes();
        let mut r = self.matrices.operator.matvec(&z[..n])?;
        for (r, f) in r.iter_mut().zip(self.source.iter()) {
            *r = f - *r;
        }
        self.matrices.mass_lu.solve_in_place(&mut r)?;
        r.push(0.0);
        Ok(r)
    }

    fn gain_transpose(&self, _s: f64, z: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        check_len("gain_transpose", z, self.state_dim())?;
        check_len("gain_transpose", p, self.state_dim())?;
        let n = self.n_nodes();
        // M is symmetric, so (M⁻¹q)ᵀp = qᵀ(M⁻¹p)
        let w = self.matrices.mass_lu.solve(&p[..n])?;
        Ok(vec![dot(&self.sink.load(z[n]), &w), p[n]])
    }

    fn gain_apply(&self, _s: f64, z: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_len("gain_apply", z, self.state_dim())?;
        check_len("gain_apply", u, 2)?;
        let n = self.n_nodes();
        let mut g = self.sink.load(z[n]);
        self.matrices.mass_lu.solve_in_place(&mut g)?;
        g.iter_mut().for_each(|v| *v *= u[0]);
        g.push(u[1]);
        Ok(g)
    }
}

/// Scalar sanity problem `ż = u`, cost `½∫u² + ½z(T)²`, with value function
/// `Φ(t, z) = z² / (2(1 + T − t))`.
#[derive(Clone, Copy, Debug)]
pub struct ScalarLqr {
    pub horizon: f64,
}

impl ScalarLqr {
    pub fn value(&self, t: f64, z: f64) -> f64 {
        z * z / (2.0 * (1.0 + self.horizon - t))
    }

    /// `(∂_tΦ, ∂_zΦ)`.
    pub fn value_grad(&self, t: f64, z: f64) -> (f64, f64) {
        let r = 1.0 + self.horizon - t;
        (z * z / (2.0 * r * r), z / r)
    }
}

impl ControlAffine for ScalarLqr {
    fn state_dim(&self) -> usize {
        1
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn drift(&self, _s: f64, _z: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0])
    }

    fn gain_transpose(&self, _s: f64, _z: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![p[0]])
    }

    fn gain_apply(&self, _s: f64, _z: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![u[0]])
    }
}
