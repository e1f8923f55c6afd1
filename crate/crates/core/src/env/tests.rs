use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::{read_snapshots, write_episode_csv, write_snapshots, Snapshots};
use super::*;
use crate::autodiff::{central_difference, relative_error};

fn quiet_config(n: usize) -> EnvConfig {
    EnvConfig {
        grid: n,
        source_magnitude: 0.0,
        ..EnvConfig::for_setup(Setup::Horizontal)
    }
}

/// Zero-velocity instance: the implicit operator rebuilt from the stiffness alone.
fn diffusion_only(n: usize) -> FemSystem {
    let cfg = quiet_config(n);
    let mut sys = FemSystem::assemble(&cfg, ProblemParams::horizontal(0.2, 0.5)).unwrap();
    let grid = sys.grid;
    let m = mass_matrix(&grid).unwrap();
    let k = stiffness_matrix(&grid, cfg.kappa).unwrap();
    let f = m.linear_combination(1.0, &k, cfg.dt).unwrap();
    sys.matrices.implicit = Arc::new(crate::autodiff::BandedLu::factor(&f).unwrap());
    sys.matrices.operator = Arc::new(k);
    sys
}

#[test]
fn constant_state_is_preserved_without_forcing() {
    // literal advection form (no inflow boundary term) annihilates constants
    let cfg = EnvConfig {
        clean_inflow: false,
        ..quiet_config(16)
    };
    let sys = FemSystem::assemble(&cfg, ProblemParams::horizontal(0.2, 0.5)).unwrap();
    let z = State {
        a: vec![0.7; sys.n_nodes()],
        alpha: 0.5,
    };
    let next = sys.step(&z, [0.0, 0.0], &SolveCounter::new()).unwrap();
    assert!(next.a.iter().all(|v| (v - 0.7).abs() < 1e-8));
}

#[test]
fn mass_is_conserved_by_pure_diffusion() {
    let sys = diffusion_only(16);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut z = State {
        a: (0..sys.n_nodes())
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
        alpha: 0.5,
    };
    let counter = SolveCounter::new();
    let mut mass = sys.total_mass(&z.a);
    for _ in 0..100 {
        z = sys.step(&z, [0.0, 0.0], &counter).unwrap();
        let m = sys.total_mass(&z.a);
        assert!((m - mass).abs() < 1e-10, "drift {}", (m - mass).abs());
        mass = m;
    }
    assert_eq!(counter.get(), 100);
}

#[test]
fn pure_diffusion_does_not_raise_the_maximum() {
    let sys = diffusion_only(16);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut z = State {
        a: (0..sys.n_nodes())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
        alpha: 0.5,
    };
    let max = |a: &[f64]| a.iter().copied().fold(f64::MIN, f64::max);
    let counter = SolveCounter::new();
    for _ in 0..50 {
        let next = sys.step(&z, [0.0, 0.0], &counter).unwrap();
        assert!(max(&next.a) <= max(&z.a) + 1e-8);
        z = next;
    }
}

#[test]
fn sink_height_moves_exactly() {
    let sys = FemSystem::assemble(&quiet_config(8), ProblemParams::horizontal(0.2, 0.5)).unwrap();
    let z = sys.initial_state();
    let next = sys.step(&z, [0.0, 1.0], &SolveCounter::new()).unwrap();
    assert!((next.alpha - z.alpha - 0.02).abs() < 1e-15);
    let clamped = sys
        .step(
            &State { alpha: 0.99, ..z },
            [0.0, 5.0],
            &SolveCounter::new(),
        )
        .unwrap();
    assert_eq!(clamped.alpha, 1.0);
}

#[test]
fn costs() {
    let cfg = EnvConfig::for_setup(Setup::Horizontal);
    assert_eq!(cfg.rho, 40.0);
    assert_eq!((cfg.steps, cfg.dt), (25, 0.02));
    assert_eq!(
        (cfg.kappa, cfg.source_magnitude, cfg.source_width),
        (0.008, 5.0, 0.01)
    );
    let sys = FemSystem::assemble(&cfg, ProblemParams::horizontal(0.2, 0.5)).unwrap();
    assert_eq!(sys.running_cost([0.0, 0.0]), 0.0);
    assert!((sys.running_cost([3.0, -4.0]) - 0.25).abs() < 1e-15);
    let mut a = vec![-1.0; sys.n_nodes()];
    assert_eq!(sys.terminal_cost(&a), 0.0);
    a[sys.grid.index(31, 10)] = 1.0;
    assert!((sys.terminal_cost(&a) - 40.0 / 961.0).abs() < 1e-15);
    assert!((sys.terminal_cost(&a) - 0.04162).abs() < 1e-5);
    let g = sys.terminal_cost_grad(&a);
    assert_eq!(g.iter().filter(|&&v| v > 0.0).count(), 1);
}

#[test]
fn zero_policy_without_source_costs_nothing() {
    let sys = FemSystem::assemble(&quiet_config(8), ProblemParams::horizontal(0.2, 0.5)).unwrap();
    let counter = SolveCounter::new();
    let ep = sys.rollout(|_, _, _| Ok([0.0, 0.0]), &counter).unwrap();
    assert_eq!(ep.objective, 0.0);
    assert_eq!(counter.get(), 25);
    assert_eq!(ep.rewards.len(), 26);
}

#[test]
fn episode_bookkeeping_is_consistent() {
    let sys = FemSystem::assemble(
        &EnvConfig {
            grid: 8,
            ..Default::default()
        },
        ProblemParams::horizontal(0.2, 0.5),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let controls: Vec<[f64; 2]> = (0..25)
        .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
        .collect();
    let ep = sys
        .rollout_open_loop(&controls, &SolveCounter::new())
        .unwrap();
    assert!((ep.recompute_objective() - ep.objective).abs() < 1e-12);
    assert!((ep.rewards.iter().sum::<f64>() - ep.objective).abs() < 1e-12);
    assert!(ep.terminal_cost > 0.0);
    assert_eq!(ep.times.len(), 26);
    assert!((ep.times[25] - 0.5).abs() < 1e-12);
}

#[test]
fn uncontrolled_plume_reaches_target() {
    for setup in [Setup::Horizontal, Setup::Sinusoidal] {
        let cfg = EnvConfig {
            grid: 16,
            ..EnvConfig::for_setup(setup)
        };
        let sys = FemSystem::assemble(&cfg, validation_set(setup)[2]).unwrap();
        let ep = sys
            .rollout(|_, _, _| Ok([0.0, 0.0]), &SolveCounter::new())
            .unwrap();
        assert!(ep.objective > 0.0 && ep.objective.is_finite());
    }
}

#[test]
fn tape_step_matches_plain_step_and_its_gradient_matches_fd() {
    let cfg = EnvConfig {
        grid: 5,
        steps: 3,
        ..Default::default()
    };
    let sys = FemSystem::assemble(&cfg, ProblemParams::horizontal(0.2, 0.45)).unwrap();
    let controls = vec![0.3, -0.5, -1.2, 0.8, 0.4, 2.0];
    let objective = |u: &[f64], tape: &mut Tape, var: bool| -> (NodeId, NodeId) {
        let un = if var {
            tape.variable(Tensor::vector(u.to_vec()))
        } else {
            tape.constant(Tensor::vector(u.to_vec()))
        };
        let dynamics = sys.bind(tape);
        let mut z = dynamics.initial_state(tape);
        let mut terms = Vec::new();
        for i in 0..3 {
            let u1 = tape.slice(un, 2 * i, 1).unwrap();
            let u2 = tape.slice(un, 2 * i + 1, 1).unwrap();
            terms.push(dynamics.running_cost(tape, u1, u2).unwrap());
            z = dynamics
                .step(tape, z, u1, u2, &SolveCounter::new())
                .unwrap()
                .0;
        }
        terms.push(dynamics.terminal_cost(tape, z.a).unwrap());
        let all = tape.concat(&terms);
        (un, tape.sum(all))
    };
    let mut tape = Tape::new();
    let (un, j) = objective(&controls, &mut tape, true);
    let pairs: Vec<[f64; 2]> = controls.chunks(2).map(|c| [c[0], c[1]]).collect();
    let ep = sys.rollout_open_loop(&pairs, &SolveCounter::new()).unwrap();
    assert!((tape.scalar(j) - ep.objective).abs() < 1e-13);
    let g = tape.backward(j).unwrap().get_or_zeros(un, 6);
    let fd = central_difference(
        &mut |u| {
            let mut t = Tape::new();
            let (_, j) = objective(u, &mut t, false);
            t.scalar(j)
        },
        &controls,
        1e-6,
    );
    assert!(relative_error(&g, &fd, 1e-8) < 1e-6, "{g:?} vs {fd:?}");
}

#[test]
fn episode_csv_and_snapshots_round_trip() {
    let sys = FemSystem::assemble(
        &EnvConfig {
            grid: 6,
            steps: 4,
            ..Default::default()
        },
        ProblemParams::horizontal(0.2, 0.5),
    )
    .unwrap();
    let ep = sys
        .rollout(|_, _, _| Ok([-1.0, 0.5]), &SolveCounter::new())
        .unwrap();
    let mut csv_bytes = Vec::new();
    write_episode_csv(&mut csv_bytes, &ep).unwrap();
    let text = String::from_utf8(csv_bytes).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "step,s,alpha,u1,u2,reward");
    assert_eq!(lines.len(), 6);
    assert!(lines[5].starts_with("4,") && lines[5].contains(",,"));

    let snaps = Snapshots::from_episode(&ep, 6);
    let mut buf = Vec::new();
    write_snapshots(&mut buf, &snaps).unwrap();
    assert_eq!(&buf[..8], b"AMPCGRD1");
    assert_eq!(buf.len(), 8 + 12 + 5 * (8 + 36 * 8));
    assert_eq!(read_snapshots(&mut buf.as_slice()).unwrap(), snaps);
}

#[test]
fn invalid_config_is_rejected() {
    let bad = EnvConfig {
        dt: 0.0,
        ..Default::default()
    };
    assert!(matches!(
        FemSystem::assemble(&bad, ProblemParams::horizontal(0.2, 0.5)),
        Err(Error::Config(_))
    ));
}

#[test]
fn default_advection_is_dissipative_and_runs_stay_bounded() {
    for setup in [Setup::Horizontal, Setup::Sinusoidal] {
        let cfg = EnvConfig {
            grid: 16,
            ..EnvConfig::for_setup(setup)
        };
        for p in validation_set(setup) {
            let sys = FemSystem::assemble(&cfg, p).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let x: Vec<f64> = (0..sys.n_nodes())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let ax = sys.matrices.operator.matvec(&x).unwrap();
            assert!(crate::autodiff::tensor::dot(&x, &ax) >= 0.0);
            let ep = sys
                .rollout(|_, _, _| Ok([0.0, 0.0]), &SolveCounter::new())
                .unwrap();
            let peak = ep
                .final_state()
                .a
                .iter()
                .fold(0.0_f64, |m, v| m.max(v.abs()));
            assert!(peak < 1.0, "{p:?}: |a| reached {peak}");
        }
    }
}
