//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- A3 A5`. The process
//! fails when a criterion fails unless it is listed in `KNOWN_FAILURES`,
//! whose entries are still reported as FAIL.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ampc_core::autodiff::{central_difference, relative_error, BandedLu};
use ampc_core::baseline::{objective_and_grad, read_cache, Termination};
use ampc_core::env::{
    mass_matrix, stiffness_matrix, EnvConfig, FemSystem, ProblemParams, Setup, SolveCounter, State,
};
use ampc_core::experiment::{
    self, read_metrics, read_summary, ExperimentConfig, Method, Policy, RunSummary,
    FINAL_CHECKPOINT, METRICS_FILE, VALIDATION_FILE,
};
use ampc_core::hjb::{episode_loss, feedback_control, hamiltonian_at, hjb_residual, ScalarLqr};
use ampc_core::nn::AdamConfig;
use ampc_core::rl::ppo::{policy_gradient, policy_ratios, ppo_update, PolicyObjective, PpoConfig};
use ampc_core::rl::rollout::returns_to_go;
use ampc_core::rl::td3::twin_targets;
use ampc_core::rl::{
    collect_episodes, Actor, ConvArch, EmaNormalizer, Exploration, ReplayBuffer, Td3Agent,
    Td3Config, TransitionBatch, ValueHead,
};
use ampc_core::value_network::{NetInput, NetShape, ValueNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria expected to fail, with the reason printed next to the verdict.
const KNOWN_FAILURES: &[(&str, &str)] = &[(
    "A6",
    "25% band around the baseline mean contains the uncontrolled objective, so every method reaches it at 0 solves and the 3x ordering cannot hold",
)];

const SEEDS: [u64; 3] = [1, 2, 3];
const WORKERS: usize = 2;

type Outcome = Result<(bool, String), Box<dyn std::error::Error + Send + Sync>>;

struct Criterion {
    id: &'static str,
    name: &'static str,
    check: fn(&Path) -> Outcome,
}

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria = [
        Criterion {
            id: "A1",
            name: "gradient fidelity",
            check: a1_gradient_fidelity,
        },
        Criterion {
            id: "A2",
            name: "adjoint fidelity",
            check: a2_adjoint_fidelity,
        },
        Criterion {
            id: "A3",
            name: "conservation",
            check: a3_conservation,
        },
        Criterion {
            id: "A4",
            name: "feedback optimality",
            check: a4_feedback_optimality,
        },
        Criterion {
            id: "A5",
            name: "HJB residual oracle",
            check: a5_residual_oracle,
        },
        Criterion {
            id: "A6",
            name: "method comparison (horizontal)",
            check: a6_method_comparison,
        },
        Criterion {
            id: "A7",
            name: "suboptimality trend (sinusoidal)",
            check: a7_suboptimality_trend,
        },
        Criterion {
            id: "A8",
            name: "RL unit properties",
            check: a8_rl_properties,
        },
        Criterion {
            id: "A9",
            name: "determinism",
            check: a9_determinism,
        },
    ];
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(WORKERS)
        .build()
        .expect("worker pool");
    let scratch = tempfile::tempdir().expect("scratch directory");
    let mut unexpected = Vec::new();
    for c in criteria
        .iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| f == c.id))
    {
        let dir = scratch.path().join(c.id);
        std::fs::create_dir_all(&dir).expect("criterion directory");
        let start = Instant::now();
        let (pass, detail) = match pool.install(|| (c.check)(&dir)) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let secs = start.elapsed().as_secs_f64();
        let known = KNOWN_FAILURES.iter().find(|(id, _)| *id == c.id);
        let verdict = match (pass, known) {
            (true, _) => "PASS".to_string(),
            (false, Some((_, why))) => format!("FAIL (known: {why})"),
            (false, None) => {
                unexpected.push(c.id);
                "FAIL".to_string()
            }
        };
        println!("{} {:<34} {verdict} [{secs:.1}s] {detail}", c.id, c.name);
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}

fn horizontal_env(grid: usize, steps: usize) -> EnvConfig {
    EnvConfig {
        grid,
        steps,
        ..EnvConfig::for_setup(Setup::Horizontal)
    }
}

/// Value network with every weight drawn uniformly from `[-scale, scale]`,
/// so the feedback control is far from zero.
fn random_net(state_dim: usize, param_dim: usize, seed: u64, scale: f64) -> ValueNetwork {
    let shape = NetShape {
        width: 4,
        depth: 2,
        state_dim,
        param_dim,
    };
    let mut net = ValueNetwork::init(shape, seed).expect("network");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa1);
    for t in net.params_mut().tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x = scale * rng.random_range(-1.0..1.0));
    }
    net
}

fn a1_gradient_fidelity(_: &Path) -> Outcome {
    let sys = FemSystem::assemble(&horizontal_env(4, 2), ProblemParams::horizontal(0.2, 0.45))?;
    let net = random_net(sys.state_dim(), 2, 17, 0.7);
    let y = [0.2, 0.45];
    let beta = [1.0; 3];
    let counter = SolveCounter::new();
    let got: Vec<f64> = episode_loss(&net, &sys, &y, beta, &counter, true)?
        .grads
        .ok_or("no gradients")?
        .concat();
    let theta = net.params().flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut picks: Vec<usize> = (0..theta.len()).collect();
    for i in 0..picks.len() {
        picks.swap(i, rng.random_range(i..theta.len()));
    }
    picks.truncate(24);
    let mut worst = 0.0_f64;
    for &k in &picks {
        let fd = central_difference(
            &mut |v| {
                let mut th = theta.clone();
                th[k] = v[0];
                let mut n = net.clone();
                n.params_mut().unflatten(&th).expect("same length");
                episode_loss(&n, &sys, &y, beta, &SolveCounter::new(), false)
                    .expect("finite loss")
                    .total
            },
            &[theta[k]],
            1e-6,
        )[0];
        worst = worst.max(relative_error(&[got[k]], &[fd], 1e-6));
    }
    Ok((
        worst < 1e-4,
        format!(
            "max relative error {worst:.2e} over {} weights",
            picks.len()
        ),
    ))
}

fn a2_adjoint_fidelity(_: &Path) -> Outcome {
    let sys = FemSystem::assemble(&horizontal_env(8, 5), ProblemParams::horizontal(0.18, 0.55))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, g) = objective_and_grad(&sys, &u, &SolveCounter::new())?;
    let fd = central_difference(
        &mut |v| {
            objective_and_grad(&sys, v, &SolveCounter::new())
                .expect("objective")
                .0
        },
        &u,
        1e-6,
    );
    let err = relative_error(&g, &fd, 1e-8);
    Ok((err < 1e-5, format!("relative error {err:.2e}")))
}

fn a3_conservation(_: &Path) -> Outcome {
    // Zero source and sink, and an implicit operator rebuilt from diffusion
    // alone (no advection); controls are zero.
    let cfg = EnvConfig {
        source_magnitude: 0.0,
        sink_amplitude: 0.0,
        ..horizontal_env(16, 100)
    };
    let mut sys = FemSystem::assemble(&cfg, ProblemParams::horizontal(0.2, 0.5))?;
    let m = mass_matrix(&sys.grid)?;
    let k = stiffness_matrix(&sys.grid, cfg.kappa)?;
    sys.matrices.implicit = BandedLu::factor(&m.linear_combination(1.0, &k, cfg.dt)?)?.into();
    sys.matrices.operator = k.into();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut z = State {
        a: (0..sys.n_nodes())
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
        alpha: 0.5,
    };
    let counter = SolveCounter::new();
    let mut mass = sys.total_mass(&z.a);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        z = sys.step(&z, [0.0, 0.0], &counter)?;
        let next = sys.total_mass(&z.a);
        worst = worst.max((next - mass).abs());
        mass = next;
    }
    Ok((worst < 1e-10, format!("max per-step drift {worst:.2e}")))
}

fn a4_feedback_optimality(_: &Path) -> Outcome {
    let sys = FemSystem::assemble(&horizontal_env(8, 25), ProblemParams::horizontal(0.15, 0.6))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y = [0.15, 0.6];
    let (mut beaten, mut grid_dev) = (0usize, 0.0_f64);
    for k in 0..50 {
        let net = random_net(sys.state_dim(), 2, 100 + k, 0.6);
        let mut z: Vec<f64> = (0..sys.n_nodes())
            .map(|_| rng.random_range(-0.2..0.5))
            .collect();
        z.push(rng.random_range(0.1..0.9));
        let s = rng.random_range(0.0..0.5);
        let g = net.grad_input(NetInput { s, z: &z, y: &y })?;
        let p: Vec<f64> = g.dz.iter().map(|v| -v).collect();
        let u = feedback_control(&sys, s, &z, &g.dz)?;
        let h = |c: &[f64]| hamiltonian_at(&sys, s, &z, &p, c).expect("hamiltonian");
        let best = h(&u);
        for _ in 0..100 {
            let c = [
                u[0] + rng.random_range(-1.0..1.0),
                u[1] + rng.random_range(-1.0..1.0),
            ];
            if h(&c) > best {
                beaten += 1;
            }
        }
        // Grid search: a coarse grid over a box that contains the candidate,
        // then a fine grid around the coarse winner.
        let radius = 2.0 * u[0].abs().max(u[1].abs()) + 1.0;
        let coarse = grid_argmax(&h, [0.0, 0.0], radius, 100);
        let fine = grid_argmax(&h, coarse, 2.0 * radius / 100.0, 100);
        grid_dev = grid_dev.max((fine[0] - u[0]).abs().max((fine[1] - u[1]).abs()));
    }
    let pass = beaten == 0 && grid_dev < 1e-2;
    Ok((pass, format!("{beaten} of 5000 perturbations beat the feedback control; grid argmax deviation {grid_dev:.1e}")))
}

fn grid_argmax(h: &dyn Fn(&[f64]) -> f64, center: [f64; 2], radius: f64, cells: usize) -> [f64; 2] {
    let step = 2.0 * radius / cells as f64;
    let mut best = (f64::MIN, center);
    for i in 0..=cells {
        for j in 0..=cells {
            let c = [
                center[0] - radius + step * i as f64,
                center[1] - radius + step * j as f64,
            ];
            let v = h(&c);
            if v > best.0 {
                best = (v, c);
            }
        }
    }
    best.1
}

fn a5_residual_oracle(_: &Path) -> Outcome {
    let lqr = ScalarLqr { horizon: 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let t = rng.random_range(0.0..1.0);
        let z = rng.random_range(-3.0..3.0);
        let (dt, dz) = lqr.value_grad(t, z);
        worst = worst.max(hjb_residual(&lqr, t, &[z], dt, &[dz])?.abs());
    }
    Ok((worst < 1e-8, format!("max |residual| {worst:.1e}")))
}

fn base_config(setup: Setup, method: Method, seed: u64, out: PathBuf) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        setup,
        method,
        seed,
        grid: 16,
        out_dir: out,
        ..Default::default()
    };
    cfg.checkpoint_every = 0;
    cfg
}

/// Reduced RL networks so the comparisons fit on a desk.
fn small_rl(cfg: &mut ExperimentConfig) {
    cfg.rl.conv_channels = [4, 8, 8];
    cfg.rl.dense_width = 32;
    cfg.rl.td3.updates_per_transition = 0.25;
}

fn solve_baseline(
    dir: &Path,
    setup: Setup,
    stride: usize,
) -> Result<(f64, Vec<Termination>, f64), Box<dyn std::error::Error + Send + Sync>> {
    let mut cfg = base_config(setup, Method::Baseline, 0, dir.join("baseline"));
    cfg.validation.stride = stride;
    let s = experiment::run(&cfg)?;
    let records = read_cache(std::fs::File::open(cfg.out_dir.join("baseline.csv"))?)?;
    let worst_grad = records
        .iter()
        .filter(|r| r.status == Termination::Converged)
        .fold(0.0_f64, |m, r| m.max(r.grad_norm));
    Ok((
        s.final_mean_val_j,
        records.iter().map(|r| r.status).collect(),
        worst_grad,
    ))
}

fn a6_method_comparison(dir: &Path) -> Outcome {
    let (baseline, status, worst_grad) = solve_baseline(dir, Setup::Horizontal, 1)?;
    let converged = status.len() == 10
        && status
            .iter()
            .all(|s| matches!(s, Termination::Converged | Termination::MaxIterations));
    let threshold = 1.25 * baseline;
    let mut hjb_ok = true;
    let mut ordered = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let mut hjb = base_config(
            Setup::Horizontal,
            Method::Hjb,
            seed,
            dir.join(format!("hjb_{seed}")),
        );
        hjb.validation.hjb_every = 1;
        hjb.max_solves = Some(3000);
        experiment::run(&hjb)?;
        let hjb_reach = read_metrics(&hjb.out_dir.join(METRICS_FILE))?.solves_to_reach(threshold);
        hjb_ok &= hjb_reach.is_some_and(|s| s <= 3000);

        let mut ppo = base_config(
            Setup::Horizontal,
            Method::Ppo,
            seed,
            dir.join(format!("ppo_{seed}")),
        );
        small_rl(&mut ppo);
        ppo.max_solves = Some(20_000);
        ppo.rl_rounds = 1000;
        ppo.stop_below = Some(threshold);
        experiment::run(&ppo)?;
        let ppo_reach = read_metrics(&ppo.out_dir.join(METRICS_FILE))?.solves_to_reach(threshold);
        let holds = match (hjb_reach, ppo_reach) {
            (Some(h), Some(p)) => p > 3 * h,
            (Some(_), None) => true,
            (None, _) => false,
        };
        ordered += usize::from(holds);
        let show = |r: Option<u64>| r.map_or("not reached".to_string(), |s| s.to_string());
        rows.push(format!(
            "seed {seed}: hjb {} ppo {}",
            show(hjb_reach),
            show(ppo_reach)
        ));
    }
    let pass = converged && hjb_ok && ordered >= 2;
    Ok((
        pass,
        format!(
            "(i) baseline {} converged, max |grad| {worst_grad:.1e}, mean {baseline:.5}; (ii) threshold {threshold:.5}, hjb within 3000: {hjb_ok}; (iii) ordering on {ordered}/3 seeds; solves to threshold: {}",
            if converged { "all" } else { "not all" },
            rows.join(", ")
        ),
    ))
}

fn final_mean(summary: &RunSummary) -> f64 {
    summary.final_mean_val_j
}

fn a7_suboptimality_trend(dir: &Path) -> Outcome {
    const STRIDE: usize = 5;
    const BUDGET: u64 = 6000;
    let (baseline, _, _) = solve_baseline(dir, Setup::Sinusoidal, STRIDE)?;
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let mut gaps = Vec::new();
        for method in [Method::Hjb, Method::Ppo, Method::Td3] {
            let mut cfg = base_config(
                Setup::Sinusoidal,
                method,
                seed,
                dir.join(format!("{method}_{seed}")),
            );
            cfg.validation.stride = STRIDE;
            cfg.validation.hjb_every = 1;
            cfg.max_solves = Some(BUDGET);
            cfg.rl_rounds = 1000;
            small_rl(&mut cfg);
            experiment::run(&cfg)?;
            gaps.push(final_mean(&read_summary(&cfg.out_dir)?) - baseline);
        }
        if gaps[0] < gaps[1] && gaps[0] < gaps[2] {
            wins += 1;
        }
        rows.push(format!(
            "seed {seed}: hjb {:.4} ppo {:.4} td3 {:.4}",
            gaps[0], gaps[1], gaps[2]
        ));
    }
    Ok((wins >= 2, format!("baseline mean {baseline:.5}; HJB smallest gap on {wins}/3 seeds at {BUDGET} solves; {}", rows.join(", "))))
}

fn a8_rl_properties(_: &Path) -> Outcome {
    let env = horizontal_env(6, 5);
    let systems: Vec<FemSystem> = [(0.12, 0.3), (0.2, 0.7), (0.15, 0.5), (0.22, 0.45)]
        .iter()
        .map(|&(a, b)| FemSystem::assemble(&env, ProblemParams::horizontal(a, b)))
        .collect::<Result<_, _>>()?;
    let arch = ConvArch {
        grid: 6,
        channels: 5,
        conv: [3, 3, 3],
        dense: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let actor = Actor::init(arch, -1.0, &mut rng);
    let mut critic = ValueHead::critic(arch, &mut rng);
    let mut norm = EmaNormalizer::new(arch.obs_dim(), 0.1, 1e-8, 10.0);
    let mut rngs: Vec<ChaCha8Rng> = (0..4).map(ChaCha8Rng::seed_from_u64).collect();
    let warm = collect_episodes(
        &actor,
        &norm,
        &systems,
        Exploration::Sample,
        &mut rngs,
        &SolveCounter::new(),
    )?;
    norm.update(
        &warm
            .iter()
            .flat_map(|e| e.raw_observations.concat())
            .collect::<Vec<_>>(),
    )?;
    let episodes = collect_episodes(
        &actor,
        &norm,
        &systems,
        Exploration::Sample,
        &mut rngs,
        &SolveCounter::new(),
    )?;
    let mut batch = TransitionBatch::from_episodes(&episodes, &critic, 1.0, 0.95)?;

    let ratio_one = policy_ratios(&actor, &batch)?.iter().all(|&r| r == 1.0);

    batch.advantages.iter_mut().for_each(|a| *a = 0.0);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let (_, g) = policy_gradient(&actor, &batch, &idx, PolicyObjective::Clipped(0.2))?;
    let mut moved = actor.clone();
    let mut oa = ampc_core::nn::Adam::new(moved.params(), AdamConfig::default());
    let mut oc = ampc_core::nn::Adam::new(critic.params(), AdamConfig::default());
    let cfg = PpoConfig {
        max_grad_norm: None,
        ..Default::default()
    };
    ppo_update(
        &mut moved,
        &mut critic,
        &mut oa,
        &mut oc,
        &batch,
        &cfg,
        1e-3,
        &mut rng,
    )?;
    let zero_grad = g.iter().flatten().all(|&x| x == 0.0) && moved == actor;

    let mut agent = Td3Agent::init(arch, AdamConfig::default(), &mut rng);
    let mut buffer = ReplayBuffer::new(1000, arch.obs_dim());
    for ep in &episodes {
        buffer.push_episode(ep);
    }
    let mb = buffer.sample(&mut rng, 16);
    let t = twin_targets(&agent, &mb, &Td3Config::default(), &mut rng)?;
    let twin_min = (0..16).all(|i| {
        let cont = if mb.dones[i] { 0.0 } else { 1.0 };
        t.target[i] == mb.rewards[i] + cont * t.q1[i].min(t.q2[i])
    });
    agent.actor = Actor::init(arch, 0.3, &mut rng);
    agent.critics = [
        ValueHead::q_network(arch, &mut rng),
        ValueHead::q_network(arch, &mut rng),
    ];
    agent.soft_update_targets(1.0)?;
    let copies = agent.actor_target == agent.actor && agent.critic_targets == agent.critics;
    // τ = 0 leaves the targets alone.
    let frozen = agent.actor_target.clone();
    agent.actor = Actor::init(arch, 0.3, &mut rng);
    agent.soft_update_targets(0.0)?;
    let keeps = agent.actor_target == frozen;

    let recursion = episodes.iter().all(|ep| {
        let r = returns_to_go(&ep.record.rewards, 1.0);
        let n = r.len() - 1;
        r[n] == ep.record.rewards[n] && (0..n).all(|i| r[i] == ep.record.rewards[i] + r[i + 1])
    });
    let checks = [
        ("ratio", ratio_one),
        ("zero-advantage", zero_grad),
        ("twin-min", twin_min),
        ("soft-update", copies && keeps),
        ("return-recursion", recursion),
    ];
    let failed: Vec<&str> = checks
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| *n)
        .collect();
    let detail = if failed.is_empty() {
        "all identities exact".to_string()
    } else {
        format!("failed: {}", failed.join(", "))
    };
    Ok((failed.is_empty(), detail))
}

/// Every file a run writes, with wall-clock fields zeroed.
fn run_fingerprint(dir: &Path) -> Result<Vec<Vec<u8>>, Box<dyn std::error::Error + Send + Sync>> {
    let mut summary = read_summary(dir)?;
    summary.wall_time_s = 0.0;
    let mut out = vec![format!("{summary:?}").into_bytes()];
    for name in [METRICS_FILE, VALIDATION_FILE, FINAL_CHECKPOINT] {
        let p = dir.join(name);
        if p.exists() {
            out.push(std::fs::read(p)?);
        }
    }
    let baseline = dir.join("baseline.csv");
    if baseline.exists() {
        let mut records = read_cache(std::fs::File::open(baseline)?)?;
        records.iter_mut().for_each(|r| r.wall_time_s = 0.0);
        out.push(format!("{records:?}").into_bytes());
    }
    Ok(out)
}

fn a9_determinism(dir: &Path) -> Outcome {
    let mut differs = Vec::new();
    for method in [Method::Hjb, Method::Ppo, Method::Td3, Method::Baseline] {
        let prints = ["a", "b"]
            .iter()
            .map(|tag| {
                let mut cfg = base_config(
                    Setup::Horizontal,
                    method,
                    7,
                    dir.join(format!("{method}_{tag}")),
                );
                cfg.grid = 8;
                cfg.validation.stride = 3;
                cfg.validation.hjb_every = 1;
                cfg.hjb.batch_size = 4;
                cfg.max_solves = Some(300);
                cfg.rl.envs = 4;
                cfg.rl.td3.warmup = 50;
                cfg.baseline.restarts = 1;
                small_rl(&mut cfg);
                experiment::run(&cfg)?;
                run_fingerprint(&cfg.out_dir)
            })
            .collect::<Result<Vec<_>, _>>()?;
        if prints[0] != prints[1] {
            differs.push(method.to_string());
        }
        if method != Method::Baseline {
            let mut cfg = base_config(Setup::Horizontal, method, 7, dir.join("eval"));
            cfg.grid = 8;
            let policy = Policy::load(&dir.join(format!("{method}_a")).join(FINAL_CHECKPOINT))?;
            let a = experiment::evaluate(&cfg, &policy)?.1;
            let b = experiment::evaluate(&cfg, &policy)?.1;
            if a.per_problem
                .iter()
                .zip(&b.per_problem)
                .any(|(x, y)| x.to_bits() != y.to_bits())
            {
                differs.push(format!("{method} evaluate"));
            }
        }
    }
    let detail = if differs.is_empty() {
        format!("hjb, ppo, td3, baseline runs and evaluation bit-identical at {WORKERS} workers")
    } else {
        format!("differs: {}", differs.join(", "))
    };
    Ok((differs.is_empty(), detail))
}
