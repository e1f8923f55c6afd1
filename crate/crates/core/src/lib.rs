//! Amortized feedback control for parameterized advection-diffusion problems.
//!
//! The crate trains feedback policies that work across a family of problem
//! parameters in two ways: a value network whose input gradient defines the
//! control through the Hamiltonian feedback form, trained with
//! Hamilton–Jacobi–Bellman penalties, and model-free actor-critic learners
//! (PPO and TD3). A per-instance adjoint/L-BFGS solver provides reference
//! objectives for measuring suboptimality.

pub mod autodiff;
pub mod baseline;
pub mod env;
pub mod error;
pub mod experiment;
pub mod hjb;
pub mod nn;
pub mod rl;
pub mod value_network;

pub use error::{Error, Result};
