//! `ampc`: train, evaluate and compare feedback controllers.
//!
//! Exit status: 0 on success, 1 for usage or configuration errors, 2 when a
//! run fails.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use ampc_core::env::{validation_set, FemSystem, ProblemParams, Setup, SolveCounter};
use ampc_core::experiment::{self, ExperimentConfig, Method, Policy, Threshold};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ampc",
    version,
    about = "Amortized feedback control for parameterized advection-diffusion problems"
)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Worker threads for parallel rollouts and solves.
    #[arg(long, env = "AMPC_WORKERS", global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a controller (or solve the baseline) and write a run directory.
    #[command(visible_alias = "run")]
    Train(ConfigArgs),
    /// Solve every validation problem with the per-instance optimizer.
    Baseline {
        #[command(flatten)]
        config: ConfigArgs,
        /// Baseline cache to reuse and update.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Compare run directories: solves to reach thresholds and suboptimality.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        /// Objective threshold, absolute (`0.15`) or relative to the baseline (`25%`).
        #[arg(short, long = "threshold")]
        thresholds: Vec<Threshold>,
        /// Baseline cache supplying optimal objectives.
        #[arg(long)]
        baseline_cache: Option<PathBuf>,
        /// Output CSV (stdout when omitted).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Roll out a stored policy on the validation problems.
    Evaluate {
        /// Checkpoint file, `uncontrolled`, or `baseline`.
        #[arg(long)]
        policy: String,
        #[command(flatten)]
        config: ConfigArgs,
        /// Per-problem CSV (stdout when omitted).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Write one episode as CSV plus optional concentration snapshots.
    DumpEpisode {
        /// Checkpoint file, `uncontrolled`, or `baseline`.
        #[arg(long)]
        policy: String,
        #[command(flatten)]
        config: ConfigArgs,
        /// Index into the setup's full validation grid.
        #[arg(long, conflicts_with = "params")]
        problem: Option<usize>,
        /// Explicit parameters `y_x1,y_x2[,y_v]`.
        #[arg(long, value_delimiter = ',')]
        params: Option<Vec<f64>>,
        #[arg(short, long)]
        out: PathBuf,
        /// Binary snapshot file for the heatmap renderer.
        #[arg(long)]
        snapshots: Option<PathBuf>,
    },
}

/// Configuration file plus command-line overrides, applied in this order:
/// file, `--set`, then the dedicated flags.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    setup: Option<Setup>,
    #[arg(long)]
    method: Option<Method>,
    /// Nodes per side.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    /// Training solve budget.
    #[arg(long)]
    max_solves: Option<u64>,
    /// Any configuration key, e.g. `--set hjb.lr.lr0=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> ampc_core::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), &self.sets)?;
        if let Some(v) = self.setup {
            cfg.setup = v;
        }
        if let Some(v) = self.method {
            cfg.method = v;
        }
        if let Some(v) = self.grid {
            cfg.grid = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if self.max_solves.is_some() {
            cfg.max_solves = self.max_solves;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn train(cfg: &ExperimentConfig) -> Result<()> {
    let s = experiment::run(cfg)?;
    println!(
        "{} {} seed {}: {} iterations, {} PDE solves, final mean validation J {:.6} (best {:.6}) -> {}",
        s.method,
        s.setup,
        s.seed,
        s.iterations,
        s.pde_solves,
        s.final_mean_val_j,
        s.best_mean_val_j,
        cfg.out_dir.display()
    );
    Ok(())
}

fn evaluate(policy: &str, cfg: &ExperimentConfig, out: &Option<PathBuf>) -> Result<()> {
    let policy = Policy::from_spec(policy, cfg.baseline)?;
    let (entries, res) = experiment::evaluate(cfg, &policy)?;
    let mut w = csv::Writer::from_writer(output(out)?);
    w.write_record(["index", "y_x1", "y_x2", "y_v", "J"])?;
    for (e, j) in entries.iter().zip(&res.per_problem) {
        w.write_record([
            e.index.to_string(),
            e.y_x1.to_string(),
            e.y_x2.to_string(),
            e.y_v.to_string(),
            j.to_string(),
        ])?;
    }
    w.flush()?;
    eprintln!(
        "{}: mean J {:.6} over {} problems",
        policy.name(),
        res.mean,
        res.per_problem.len()
    );
    Ok(())
}

fn problem_params(
    setup: Setup,
    problem: Option<usize>,
    params: &Option<Vec<f64>>,
) -> Result<ProblemParams> {
    let p = match (problem, params.as_deref()) {
        (Some(k), _) => {
            let all = validation_set(setup);
            let n = all.len();
            *all.get(k)
                .with_context(|| format!("problem index {k} out of range (0..{n})"))?
        }
        (None, Some([a, b])) if setup == Setup::Horizontal => ProblemParams::horizontal(*a, *b),
        (None, Some([a, b, v])) if setup == Setup::Sinusoidal => {
            ProblemParams::sinusoidal(*a, *b, *v)
        }
        (None, Some(_)) => bail!(ampc_core::Error::Config(format!(
            "{setup} problems take {} parameters",
            setup.param_dim()
        ))),
        (None, None) => validation_set(setup)[0],
    };
    Ok(p)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => train(&args.load()?),
        Command::Baseline { config, cache } => {
            let mut cfg = config.load()?;
            cfg.method = Method::Baseline;
            if cache.is_some() {
                cfg.baseline_cache = cache;
            }
            train(&cfg)
        }
        Command::Compare {
            runs,
            thresholds,
            baseline_cache,
            out,
        } => {
            let c = experiment::compare_dirs(&runs, &thresholds, baseline_cache.as_deref())?;
            experiment::write_comparison(output(&out)?, &c)?;
            Ok(())
        }
        Command::Evaluate {
            policy,
            config,
            out,
        } => evaluate(&policy, &config.load()?, &out),
        Command::DumpEpisode {
            policy,
            config,
            problem,
            params,
            out,
            snapshots,
        } => {
            let cfg = config.load()?;
            let env = cfg.env_config();
            let policy = Policy::from_spec(&policy, cfg.baseline)?;
            policy.check_compatible(&env, cfg.setup)?;
            let sys = FemSystem::assemble(&env, problem_params(cfg.setup, problem, &params)?)?;
            let ep = policy.rollout(&sys, &SolveCounter::new())?;
            experiment::dump_episode(&ep, env.grid, &out, snapshots.as_deref())?;
            eprintln!(
                "{}: J {:.6} -> {}",
                policy.name(),
                ep.objective,
                out.display()
            );
            Ok(())
        }
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<ampc_core::Error>(),
            Some(ampc_core::Error::Config(_))
        ) || c.downcast_ref::<clap::Error>().is_some()
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = ["warn", "info", "debug"][usize::from(cli.verbose).min(2)];
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 1 } else { 2 })
        }
    }
}
