use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineConfig;
use crate::env::{validation_set, EnvConfig, ProblemParams, Setup};
use crate::error::{Error, Result};
use crate::hjb::HjbConfig;
use crate::nn::LrSchedule;
use crate::rl::RlConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Hjb,
    Ppo,
    Td3,
    Baseline,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Hjb => "hjb",
            Method::Ppo => "ppo",
            Method::Td3 => "td3",
            Method::Baseline => "baseline",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hjb" => Ok(Method::Hjb),
            "ppo" => Ok(Method::Ppo),
            "td3" => Ok(Method::Td3),
            "baseline" => Ok(Method::Baseline),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Environment constants that differ from the setup's defaults.
/// Unset fields take the value from [`EnvConfig::for_setup`]; the grid size
/// comes from [`ExperimentConfig::grid`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvOverrides {
    pub kappa: Option<f64>,
    pub source_magnitude: Option<f64>,
    pub source_width: Option<f64>,
    pub rho: Option<f64>,
    pub steps: Option<usize>,
    pub dt: Option<f64>,
    pub alpha0: Option<f64>,
    pub sink_amplitude: Option<f64>,
    pub sink_x1: Option<f64>,
    pub sink_width_x1: Option<f64>,
    pub sink_width_x2: Option<f64>,
    pub target_x1: Option<f64>,
    pub clean_inflow: Option<bool>,
}

impl EnvOverrides {
    pub fn resolve(&self, setup: Setup, grid: usize) -> EnvConfig {
        let base = EnvConfig::for_setup(setup);
        EnvConfig {
            grid,
            kappa: self.kappa.unwrap_or(base.kappa),
            source_magnitude: self.source_magnitude.unwrap_or(base.source_magnitude),
            source_width: self.source_width.unwrap_or(base.source_width),
            rho: self.rho.unwrap_or(base.rho),
            steps: self.steps.unwrap_or(base.steps),
            dt: self.dt.unwrap_or(base.dt),
            alpha0: self.alpha0.unwrap_or(base.alpha0),
            sink_amplitude: self.sink_amplitude.unwrap_or(base.sink_amplitude),
            sink_x1: self.sink_x1.unwrap_or(base.sink_x1),
            sink_width_x1: self.sink_width_x1.unwrap_or(base.sink_width_x1),
            sink_width_x2: self.sink_width_x2.unwrap_or(base.sink_width_x2),
            target_x1: self.target_x1.unwrap_or(base.target_x1),
            clean_inflow: self.clean_inflow.unwrap_or(base.clean_inflow),
        }
    }

    /// Every field filled in, for the config copy written next to results.
    pub fn pinned(env: &EnvConfig) -> Self {
        Self {
            kappa: Some(env.kappa),
            source_magnitude: Some(env.source_magnitude),
            source_width: Some(env.source_width),
            rho: Some(env.rho),
            steps: Some(env.steps),
            dt: Some(env.dt),
            alpha0: Some(env.alpha0),
            sink_amplitude: Some(env.sink_amplitude),
            sink_x1: Some(env.sink_x1),
            sink_width_x1: Some(env.sink_width_x1),
            sink_width_x2: Some(env.sink_width_x2),
            target_x1: Some(env.target_x1),
            clean_inflow: Some(env.clean_inflow),
        }
    }
}

/// Which fixed problems are rolled out for validation, and how often.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationSpec {
    /// Keep every `stride`-th problem of the setup's fixed grid (10
    /// horizontal, 30 sinusoidal). 1 keeps all of them.
    pub stride: usize,
    /// Validate after every this many HJB iterations.
    pub hjb_every: usize,
    /// Validate after every this many RL collection rounds.
    pub rl_every: usize,
}

impl Default for ValidationSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            hjb_every: 10,
            rl_every: 1,
        }
    }
}

impl ValidationSpec {
    pub fn problems(&self, setup: Setup) -> Vec<ProblemParams> {
        validation_set(setup)
            .into_iter()
            .step_by(self.stride.max(1))
            .collect()
    }
}

/// Everything needed to reproduce one run. Every field is optional in the
/// TOML file; the defaults are those of [`ExperimentConfig::default`].
///
/// The top-level `seed` overrides the seeds inside the method sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `horizontal` (default) or `sinusoidal`.
    pub setup: Setup,
    /// `hjb` (default), `ppo`, `td3` or `baseline`.
    pub method: Method,
    /// Nodes per side; default 16.
    pub grid: usize,
    /// Default 0.
    pub seed: u64,
    /// Default `runs/latest`.
    pub out_dir: PathBuf,
    pub env: EnvOverrides,
    pub validation: ValidationSpec,
    /// Stop training once this many training PDE solves have been spent.
    pub max_solves: Option<u64>,
    /// Stop training at the first validation whose mean objective is at or
    /// below this value.
    pub stop_below: Option<f64>,
    /// Checkpoint every this many iterations/rounds (0 = final only); default 50.
    pub checkpoint_every: usize,
    /// Collection rounds for PPO and TD3; default 100.
    pub rl_rounds: usize,
    pub hjb: HjbConfig,
    pub rl: RlConfig,
    pub baseline: BaselineConfig,
    /// Baseline results reused across runs; `baseline` runs also update it.
    pub baseline_cache: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            setup: Setup::Horizontal,
            method: Method::Hjb,
            grid: 16,
            seed: 0,
            out_dir: PathBuf::from("runs/latest"),
            env: EnvOverrides::default(),
            validation: ValidationSpec::default(),
            max_solves: None,
            stop_below: None,
            checkpoint_every: 50,
            rl_rounds: 100,
            hjb: default_hjb(),
            rl: RlConfig::default(),
            baseline: BaselineConfig::default(),
            baseline_cache: None,
        }
    }
}

/// The stand-alone trainer defaults diverge at the feedback scale used
/// here, so experiments start from a smaller step and lighter penalties.
fn default_hjb() -> HjbConfig {
    HjbConfig {
        beta: [0.1, 0.1, 0.01],
        lr: LrSchedule {
            lr0: 0.003,
            decay: 0.975,
            floor: 0.0025,
        },
        ..HjbConfig::default()
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_table(toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?)
    }

    /// Layers `table` over the serialized defaults, so a partial section
    /// keeps the experiment defaults for the keys it leaves out.
    fn from_table(table: toml::Table) -> Result<Self> {
        let mut merged =
            toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, table);
        merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Reads a TOML file and applies `key.path=value` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn env_config(&self) -> EnvConfig {
        self.env.resolve(self.setup, self.grid)
    }

    /// Copy with derived values written out: environment constants pinned
    /// and the top-level seed pushed into every method section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.env = EnvOverrides::pinned(&self.env_config());
        c.hjb.seed = self.seed;
        c.rl.seed = self.seed;
        c.baseline.seed = self.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.env_config().validate()?;
        if self.validation.stride == 0
            || self.validation.hjb_every == 0
            || self.validation.rl_every == 0
        {
            return Err(Error::Config(
                "validation stride and cadences must be positive".into(),
            ));
        }
        match self.method {
            Method::Hjb => self.hjb.validate(),
            Method::Ppo | Method::Td3 => {
                if self.rl_rounds == 0 {
                    return Err(Error::Config("rl_rounds must be positive".into()));
                }
                self.rl.validate()
            }
            Method::Baseline => Ok(()),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is parsed as a TOML
/// literal and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = parse_literal(raw.trim());
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("empty key in `{assignment}`")))?;
    let mut node = table;
    for p in parts {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
