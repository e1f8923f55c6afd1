use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::baseline::{solve_instance, BaselineConfig};
use crate::env::io::{write_episode_csv, write_snapshots, Snapshots};
use crate::env::{EnvConfig, EpisodeRecord, FemSystem, Setup, SolveCounter};
use crate::error::{Error, Result};
use crate::hjb::{feedback_policy, ValidationResult};
use crate::nn::{read_checkpoint, write_checkpoint};
use crate::rl::{actor_policy, load_policy, Actor, EmaNormalizer};
use crate::value_network::{NetShape, ValueNetwork};

/// Anything that can drive an episode.
#[derive(Clone, Debug)]
pub enum Policy {
    Uncontrolled,
    /// Per-instance open-loop optimum from the adjoint solver.
    Baseline(BaselineConfig),
    Value {
        net: ValueNetwork,
        normalize_params: bool,
    },
    Actor {
        actor: Actor,
        normalizer: EmaNormalizer,
    },
}

pub fn save_value_network(path: &Path, net: &ValueNetwork, normalize_params: bool) -> Result<()> {
    let mut meta = net.checkpoint_meta();
    meta["normalize_params"] = serde_json::Value::Bool(normalize_params);
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, &meta, net.params())?;
    w.flush()?;
    Ok(())
}

impl Policy {
    /// `uncontrolled`, `baseline`, or a checkpoint path.
    pub fn from_spec(spec: &str, baseline: BaselineConfig) -> Result<Self> {
        match spec {
            "uncontrolled" => Ok(Policy::Uncontrolled),
            "baseline" => Ok(Policy::Baseline(baseline)),
            path => Self::load(Path::new(path)),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(&mut BufReader::new(File::open(path)?))?;
        match ck.meta.get("kind").and_then(|k| k.as_str()) {
            Some("value_network") => {
                let shape: NetShape = serde_json::from_value(ck.meta["shape"].clone())
                    .map_err(|e| Error::Format(e.to_string()))?;
                let seed = ck.meta["seed"].as_u64().unwrap_or(0);
                let normalize_params = ck.meta["normalize_params"].as_bool().unwrap_or(false);
                Ok(Policy::Value {
                    net: ValueNetwork::from_params(shape, seed, ck.params)?,
                    normalize_params,
                })
            }
            Some("actor") => {
                let (actor, normalizer) = load_policy(path)?;
                Ok(Policy::Actor { actor, normalizer })
            }
            other => Err(Error::Format(format!(
                "unrecognized checkpoint kind {other:?}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Uncontrolled => "uncontrolled",
            Policy::Baseline(_) => "baseline",
            Policy::Value { .. } => "hjb",
            Policy::Actor { .. } => "actor",
        }
    }

    /// Refuses networks trained for a different grid or setup.
    pub fn check_compatible(&self, env: &EnvConfig, setup: Setup) -> Result<()> {
        let ok = match self {
            Policy::Uncontrolled | Policy::Baseline(_) => true,
            Policy::Value { net, .. } => {
                let s = net.shape();
                s.state_dim == env.grid * env.grid + 1 && s.param_dim == setup.param_dim()
            }
            Policy::Actor { actor, .. } => {
                let a = actor.arch();
                a.grid == env.grid && a.channels == crate::rl::channel_count(setup)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "checkpoint does not fit a {}×{} {setup} problem",
                env.grid, env.grid
            )))
        }
    }

    pub fn rollout(&self, sys: &FemSystem, counter: &SolveCounter) -> Result<EpisodeRecord> {
        match self {
            Policy::Uncontrolled => sys.rollout(|_, _, _| Ok([0.0, 0.0]), counter),
            Policy::Baseline(cfg) => {
                let sol = solve_instance(sys, cfg)?;
                sys.rollout_open_loop(&sol.controls, counter)
            }
            Policy::Value {
                net,
                normalize_params,
            } => {
                let y = if *normalize_params {
                    sys.params.normalized_vec()
                } else {
                    sys.params.as_vec()
                };
                sys.rollout(feedback_policy(net, sys, &y), counter)
            }
            Policy::Actor { actor, normalizer } => {
                sys.rollout(actor_policy(actor, normalizer, sys), counter)
            }
        }
    }

    /// Objectives on fixed problems; solves are not charged anywhere.
    pub fn evaluate(&self, systems: &[FemSystem]) -> Result<ValidationResult> {
        let counter = SolveCounter::new();
        let j = systems
            .par_iter()
            .map(|sys| self.rollout(sys, &counter).map(|ep| ep.objective))
            .collect::<Result<Vec<_>>>()?;
        Ok(ValidationResult::from_objectives(j))
    }
}

/// Writes the episode CSV and, when requested, the snapshot file.
pub fn dump_episode(
    ep: &EpisodeRecord,
    grid: usize,
    csv_path: &Path,
    snapshot_path: Option<&Path>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(csv_path)?);
    write_episode_csv(&mut w, ep)?;
    w.flush()?;
    if let Some(p) = snapshot_path {
        let mut w = BufWriter::new(File::create(p)?);
        write_snapshots(&mut w, &Snapshots::from_episode(ep, grid))?;
        w.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::io::read_snapshots;
    use crate::env::ProblemParams;
    use crate::rl::ConvArch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sys() -> FemSystem {
        let env = EnvConfig {
            grid: 6,
            steps: 4,
            ..EnvConfig::for_setup(Setup::Horizontal)
        };
        FemSystem::assemble(&env, ProblemParams::horizontal(0.2, 0.5)).unwrap()
    }

    #[test]
    fn checkpoints_load_as_the_right_policy() {
        let dir = tempfile::tempdir().unwrap();
        let s = sys();
        let shape = NetShape {
            width: 4,
            depth: 2,
            state_dim: 37,
            param_dim: 2,
        };
        let net = ValueNetwork::init(shape, 3).unwrap();
        let vpath = dir.path().join("v.ckpt");
        save_value_network(&vpath, &net, true).unwrap();
        let arch = ConvArch {
            grid: 6,
            channels: 5,
            conv: [2, 2, 2],
            dense: 4,
        };
        let actor = Actor::init(arch, -1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let norm = EmaNormalizer::new(arch.obs_dim(), 0.1, 1e-8, 10.0);
        let apath = dir.path().join("a.ckpt");
        crate::rl::save_policy(&apath, "ppo", &actor, &norm).unwrap();

        let v = Policy::load(&vpath).unwrap();
        assert!(matches!(
            &v,
            Policy::Value {
                normalize_params: true,
                ..
            }
        ));
        let direct = s
            .rollout(
                feedback_policy(&net, &s, &s.params.normalized_vec()),
                &SolveCounter::new(),
            )
            .unwrap();
        assert_eq!(v.rollout(&s, &SolveCounter::new()).unwrap(), direct);
        let a = Policy::load(&apath).unwrap();
        assert_eq!(a.name(), "actor");
        a.check_compatible(&s.config, Setup::Horizontal).unwrap();
        assert!(a.check_compatible(&s.config, Setup::Sinusoidal).is_err());
        assert!(v
            .check_compatible(
                &EnvConfig {
                    grid: 8,
                    ..s.config.clone()
                },
                Setup::Horizontal
            )
            .is_err());
        std::fs::write(dir.path().join("junk"), b"nope").unwrap();
        assert!(Policy::load(&dir.path().join("junk")).is_err());
    }

    #[test]
    fn dumps_match_the_episode() {
        let dir = tempfile::tempdir().unwrap();
        let s = sys();
        let ep = Policy::Uncontrolled
            .rollout(&s, &SolveCounter::new())
            .unwrap();
        let (c, b) = (dir.path().join("ep.csv"), dir.path().join("ep.bin"));
        dump_episode(&ep, 6, &c, Some(&b)).unwrap();
        let text = std::fs::read_to_string(&c).unwrap();
        assert_eq!(text.lines().count(), 1 + 5);
        let snaps = read_snapshots(&mut File::open(&b).unwrap()).unwrap();
        assert_eq!(snaps, Snapshots::from_episode(&ep, 6));
    }
}
