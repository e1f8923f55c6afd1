use std::fs::{self, File};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::metrics::{MetricsRow, MetricsWriter};
use super::policy::save_value_network;
use crate::baseline::{read_cache, solve_instance, write_cache, BaselineRecord};
use crate::env::{EnvConfig, FemSystem, ProblemParams, Setup};
use crate::error::{Error, Result};
use crate::hjb::{validate, HjbTrainer, ValidationResult};
use crate::rl::{PpoTrainer, Td3Trainer};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BASELINE_FILE: &str = "baseline.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// One row of `validation.csv`: which problems a run was measured on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub index: usize,
    pub setup: Setup,
    pub y_x1: f64,
    pub y_x2: f64,
    pub y_v: f64,
    pub grid: usize,
    pub n_steps: usize,
}

impl ValidationEntry {
    pub fn key(&self) -> (Setup, (f64, f64, f64), usize, usize) {
        (
            self.setup,
            (self.y_x1, self.y_x2, self.y_v),
            self.grid,
            self.n_steps,
        )
    }
}

pub fn validation_entries(problems: &[ProblemParams], env: &EnvConfig) -> Vec<ValidationEntry> {
    problems
        .iter()
        .enumerate()
        .map(|(index, p)| ValidationEntry {
            index,
            setup: p.setup,
            y_x1: p.source_x1,
            y_x2: p.source_x2,
            y_v: p.phase,
            grid: env.grid,
            n_steps: env.steps,
        })
        .collect()
}

pub fn read_validation_entries(path: &Path) -> Result<Vec<ValidationEntry>> {
    let mut rd = csv::Reader::from_path(path)?;
    Ok(rd
        .deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Final state of a run, written to `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub setup: Setup,
    pub seed: u64,
    pub grid: usize,
    pub n_steps: usize,
    pub validation_problems: usize,
    /// Training iterations (HJB) or collection rounds (RL); 0 for the baseline.
    pub iterations: usize,
    /// Training solves; for the baseline, solves spent on instances not
    /// already in the cache.
    pub pde_solves: u64,
    pub final_mean_val_j: f64,
    pub best_mean_val_j: f64,
    /// Training ended because `stop_below` was met.
    pub reached_stop: bool,
    pub wall_time_s: f64,
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let f = File::open(dir.join(SUMMARY_FILE))?;
    serde_json::from_reader(f)
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join(SUMMARY_FILE).display())))
}

trait Learner {
    const LOSSES: &'static [&'static str];
    /// Advances one iteration; returns the loss columns and learning rate.
    fn advance(&mut self) -> Result<(Vec<Option<f64>>, f64)>;
    fn iteration(&self) -> usize;
    fn solves(&self) -> u64;
    fn exhausted(&self) -> bool;
    fn validate(&self, systems: &[FemSystem]) -> Result<ValidationResult>;
    fn save(&self, path: &Path) -> Result<()>;
}

struct HjbLearner(HjbTrainer);

impl Learner for HjbLearner {
    const LOSSES: &'static [&'static str] = &[
        "loss",
        "train_J",
        "residual",
        "terminal_value",
        "terminal_grad",
        "grad_norm",
    ];

    fn advance(&mut self) -> Result<(Vec<Option<f64>>, f64)> {
        let it = self.0.step()?;
        let t = it.terms;
        let cols = [
            it.loss,
            t.objective,
            t.residual,
            t.terminal_value,
            t.terminal_grad,
            it.grad_norm,
        ];
        Ok((cols.into_iter().map(Some).collect(), it.lr))
    }

    fn iteration(&self) -> usize {
        self.0.iteration()
    }

    fn solves(&self) -> u64 {
        self.0.solves()
    }

    fn exhausted(&self) -> bool {
        self.0.finished()
    }

    fn validate(&self, systems: &[FemSystem]) -> Result<ValidationResult> {
        validate(self.0.network(), systems, self.0.config().normalize_params)
    }

    fn save(&self, path: &Path) -> Result<()> {
        save_value_network(path, self.0.network(), self.0.config().normalize_params)
    }
}

macro_rules! rl_learner {
    ($name:ident, $trainer:ty, [$($col:literal),*]) => {
        struct $name {
            trainer: $trainer,
            rounds: usize,
        }

        impl Learner for $name {
            const LOSSES: &'static [&'static str] = &["train_J", $($col),*];

            fn advance(&mut self) -> Result<(Vec<Option<f64>>, f64)> {
                let r = self.trainer.step()?;
                let mut cols = vec![Some(r.episode_objective)];
                cols.extend(r.losses.iter().map(|(_, v)| Some(*v)));
                Ok((cols, r.lr))
            }

            fn iteration(&self) -> usize {
                self.trainer.rounds()
            }

            fn solves(&self) -> u64 {
                self.trainer.solves()
            }

            fn exhausted(&self) -> bool {
                self.trainer.rounds() >= self.rounds
            }

            fn validate(&self, systems: &[FemSystem]) -> Result<ValidationResult> {
                self.trainer.validate(systems)
            }

            fn save(&self, path: &Path) -> Result<()> {
                self.trainer.save(path)
            }
        }
    };
}

rl_learner!(
    PpoLearner,
    PpoTrainer,
    ["policy_loss", "value_loss", "approx_kl", "clip_fraction"]
);
rl_learner!(Td3Learner, Td3Trainer, ["critic_loss", "actor_loss"]);

struct Outcome {
    iterations: usize,
    pde_solves: u64,
    final_mean: f64,
    best_mean: f64,
    reached_stop: bool,
}

fn train<L: Learner>(
    mut l: L,
    cfg: &ExperimentConfig,
    systems: &[FemSystem],
    every: usize,
) -> Result<Outcome> {
    let out = &cfg.out_dir;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut w = MetricsWriter::create(&out.join(METRICS_FILE), systems.len(), L::LOSSES)?;
    let blank = vec![None; L::LOSSES.len()];
    let v = l.validate(systems)?;
    w.write(&MetricsRow::new(0, 0, &v, blank, None))?;
    let (mut final_mean, mut best_mean) = (v.mean, v.mean);
    let reached = |m: f64| cfg.stop_below.is_some_and(|t| m <= t);
    let mut stop = reached(v.mean);
    let over_budget = |l: &L| cfg.max_solves.is_some_and(|m| l.solves() >= m);

    while !stop && !l.exhausted() && !over_budget(&l) {
        let (losses, lr) = l.advance()?;
        let it = l.iteration();
        let last = l.exhausted() || over_budget(&l);
        if it.is_multiple_of(every) || last {
            let v = l.validate(systems)?;
            w.write(&MetricsRow::new(it, l.solves(), &v, losses, Some(lr)))?;
            log::info!(
                "iter {it}: {} solves, mean validation J {:.6}",
                l.solves(),
                v.mean
            );
            final_mean = v.mean;
            best_mean = best_mean.min(v.mean);
            stop = reached(v.mean);
        }
        if cfg.checkpoint_every > 0 && it.is_multiple_of(cfg.checkpoint_every) {
            l.save(&ckpt_dir.join(format!("iter_{it:06}.ckpt")))?;
        }
    }
    l.save(&out.join(FINAL_CHECKPOINT))?;
    Ok(Outcome {
        iterations: l.iteration(),
        pde_solves: l.solves(),
        final_mean,
        best_mean,
        reached_stop: stop,
    })
}

pub fn baseline_record(sys: &FemSystem, sol: &crate::baseline::BaselineSolution) -> BaselineRecord {
    BaselineRecord {
        setup: sys.params.setup,
        y_x1: sys.params.source_x1,
        y_x2: sys.params.source_x2,
        y_v: sys.params.phase,
        grid: sys.config.grid,
        n_steps: sys.config.steps,
        j_star: sol.objective,
        iterations: sol.best.iterations,
        grad_norm: sol.best.grad_inf,
        wall_time_s: sol.wall_time_s,
        status: sol.best.status,
    }
}

/// Cached baseline objectives for `entries`, in order; `None` when any
/// problem is missing from the cache.
pub fn lookup_baseline(cache: &[BaselineRecord], entries: &[ValidationEntry]) -> Option<Vec<f64>> {
    entries
        .iter()
        .map(|e| {
            let (setup, y, grid, n) = e.key();
            cache
                .iter()
                .find(|r| r.matches(setup, y, grid, n))
                .map(|r| r.j_star)
        })
        .collect()
}

fn run_baseline(
    cfg: &ExperimentConfig,
    systems: &[FemSystem],
    entries: &[ValidationEntry],
) -> Result<Outcome> {
    let mut cache = match &cfg.baseline_cache {
        Some(p) if p.exists() => read_cache(File::open(p)?)?,
        _ => Vec::new(),
    };
    let missing: Vec<usize> = (0..entries.len())
        .filter(|&k| lookup_baseline(&cache, &entries[k..=k]).is_none())
        .collect();
    let solved = missing
        .par_iter()
        .map(|&k| {
            solve_instance(&systems[k], &cfg.baseline)
                .map(|s| (baseline_record(&systems[k], &s), s.solves))
        })
        .collect::<Result<Vec<_>>>()?;
    let pde_solves = solved.iter().map(|(_, n)| n).sum();
    cache.extend(solved.into_iter().map(|(r, _)| r));

    let records: Vec<BaselineRecord> = entries
        .iter()
        .map(|e| {
            let (setup, y, grid, n) = e.key();
            cache
                .iter()
                .find(|r| r.matches(setup, y, grid, n))
                .cloned()
                .expect("solved above")
        })
        .collect();
    write_cache(File::create(cfg.out_dir.join(BASELINE_FILE))?, &records)?;
    if let Some(p) = &cfg.baseline_cache {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        write_cache(File::create(p)?, &cache)?;
    }
    let mean = records.iter().map(|r| r.j_star).sum::<f64>() / records.len() as f64;
    Ok(Outcome {
        iterations: 0,
        pde_solves,
        final_mean: mean,
        best_mean: mean,
        reached_stop: false,
    })
}

/// Runs one experiment and writes its directory:
///
/// - `config.toml`: the resolved configuration
/// - `validation.csv`: the validation problems
/// - `metrics.csv`: learning curve (training methods)
/// - `baseline.csv`: per-problem optimal objectives (baseline method)
/// - `checkpoints/`, `final.ckpt`: weights (training methods)
/// - `summary.json`
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let env = cfg.env_config();
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(CONFIG_FILE), cfg.to_toml()?)?;

    let problems = cfg.validation.problems(cfg.setup);
    let entries = validation_entries(&problems, &env);
    let mut vw = csv::Writer::from_path(cfg.out_dir.join(VALIDATION_FILE))?;
    for e in &entries {
        vw.serialize(e)?;
    }
    vw.flush()?;
    let systems = problems
        .par_iter()
        .map(|p| FemSystem::assemble(&env, *p))
        .collect::<Result<Vec<_>>>()?;

    let start = Instant::now();
    let v = &cfg.validation;
    let outcome = match cfg.method {
        Method::Hjb => train(
            HjbLearner(HjbTrainer::new(cfg.hjb.clone(), &env, cfg.setup)?),
            &cfg,
            &systems,
            v.hjb_every,
        )?,
        Method::Ppo => {
            let trainer = PpoTrainer::new(cfg.rl.clone(), &env, cfg.setup)?;
            train(
                PpoLearner {
                    trainer,
                    rounds: cfg.rl_rounds,
                },
                &cfg,
                &systems,
                v.rl_every,
            )?
        }
        Method::Td3 => {
            let trainer = Td3Trainer::new(cfg.rl.clone(), &env, cfg.setup)?;
            train(
                Td3Learner {
                    trainer,
                    rounds: cfg.rl_rounds,
                },
                &cfg,
                &systems,
                v.rl_every,
            )?
        }
        Method::Baseline => run_baseline(&cfg, &systems, &entries)?,
    };
    let summary = RunSummary {
        method: cfg.method,
        setup: cfg.setup,
        seed: cfg.seed,
        grid: env.grid,
        n_steps: env.steps,
        validation_problems: systems.len(),
        iterations: outcome.iterations,
        pde_solves: outcome.pde_solves,
        final_mean_val_j: outcome.final_mean,
        best_mean_val_j: outcome.best_mean,
        reached_stop: outcome.reached_stop,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(cfg.out_dir.join(SUMMARY_FILE), text + "\n")?;
    Ok(summary)
}

/// Per-problem objectives of a stored policy on a config's validation set.
pub fn evaluate(
    cfg: &ExperimentConfig,
    policy: &super::Policy,
) -> Result<(Vec<ValidationEntry>, ValidationResult)> {
    cfg.validate()?;
    let env = cfg.env_config();
    policy.check_compatible(&env, cfg.setup)?;
    let problems = cfg.validation.problems(cfg.setup);
    let systems = problems
        .par_iter()
        .map(|p| FemSystem::assemble(&env, *p))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        validation_entries(&problems, &env),
        policy.evaluate(&systems)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::metrics::read_metrics;
    use crate::experiment::EnvOverrides;

    fn tiny(method: Method, dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            method,
            grid: 6,
            seed: 3,
            out_dir: dir.to_path_buf(),
            env: EnvOverrides {
                steps: Some(4),
                ..Default::default()
            },
            checkpoint_every: 2,
            rl_rounds: 3,
            ..Default::default()
        };
        cfg.validation.stride = 4;
        cfg.validation.hjb_every = 2;
        cfg.hjb.batch_size = 2;
        cfg.hjb.pool_size = 4;
        cfg.hjb.iterations = 5;
        cfg.hjb.width = 4;
        cfg.hjb.depth = 2;
        cfg.rl.conv_channels = [2, 2, 2];
        cfg.rl.dense_width = 4;
        cfg.rl.envs = 2;
        cfg.rl.td3.warmup = 4;
        cfg.rl.td3.batch_size = 4;
        cfg.rl.ppo.minibatch = 4;
        cfg.baseline.restarts = 0;
        cfg.baseline.lbfgs.max_iter = 20;
        cfg
    }

    #[test]
    fn hjb_run_writes_its_directory() {
        let dir = tempfile::tempdir().unwrap();
        let s = run(&tiny(Method::Hjb, dir.path())).unwrap();
        assert_eq!(
            (s.iterations, s.pde_solves, s.validation_problems),
            (5, 5 * 2 * 4, 3)
        );
        let m = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        let iters: Vec<usize> = m.rows.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![0, 2, 4, 5]);
        assert!(m.rows[0].losses.iter().all(Option::is_none));
        assert_eq!(m.last().unwrap().mean_val_j, s.final_mean_val_j);
        for f in [
            CONFIG_FILE,
            VALIDATION_FILE,
            SUMMARY_FILE,
            FINAL_CHECKPOINT,
            "checkpoints/iter_000004.ckpt",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(read_summary(dir.path()).unwrap(), s);
        let back =
            ExperimentConfig::from_toml(&fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap())
                .unwrap();
        assert_eq!(back.hjb.seed, 3);
    }

    #[test]
    fn rl_runs_validate_every_round() {
        for method in [Method::Ppo, Method::Td3] {
            let dir = tempfile::tempdir().unwrap();
            let s = run(&tiny(method, dir.path())).unwrap();
            assert_eq!(s.pde_solves, 3 * 2 * 4);
            let m = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
            assert_eq!(
                m.rows.iter().map(|r| r.pde_solves).collect::<Vec<_>>(),
                vec![0, 8, 16, 24]
            );
        }
    }

    #[test]
    fn budget_and_stop_threshold_end_training() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            max_solves: Some(10),
            ..tiny(Method::Ppo, dir.path())
        };
        assert_eq!(run(&cfg).unwrap().pde_solves, 16);
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            stop_below: Some(f64::INFINITY),
            ..tiny(Method::Ppo, dir.path())
        };
        let s = run(&cfg).unwrap();
        assert!(s.reached_stop);
        assert_eq!(s.pde_solves, 0);
    }

    #[test]
    fn baseline_run_fills_and_reuses_the_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("cache/baseline.csv");
        let cfg = ExperimentConfig {
            baseline_cache: Some(cache.clone()),
            ..tiny(Method::Baseline, &dir.path().join("a"))
        };
        let first = run(&cfg).unwrap();
        assert!(first.pde_solves > 0);
        let cfg = ExperimentConfig {
            out_dir: dir.path().join("b"),
            ..cfg
        };
        let second = run(&cfg).unwrap();
        assert_eq!(second.pde_solves, 0);
        assert_eq!(second.final_mean_val_j, first.final_mean_val_j);
        let entries = read_validation_entries(&dir.path().join("b").join(VALIDATION_FILE)).unwrap();
        let cached = read_cache(File::open(&cache).unwrap()).unwrap();
        let j = lookup_baseline(&cached, &entries).unwrap();
        assert_eq!(
            j.iter().sum::<f64>() / j.len() as f64,
            first.final_mean_val_j
        );
    }

    #[test]
    fn invalid_config_fails_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("never");
        let mut cfg = tiny(Method::Hjb, &out);
        cfg.hjb.batch_size = 0;
        assert!(matches!(run(&cfg), Err(Error::Config(_))));
        assert!(!out.exists());
    }
}
